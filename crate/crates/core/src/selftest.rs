//! Runtime numeric self-checks for the attention, RCVE and DLP code.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::rcve::{
    cross_attention, cross_attention_traced, dlp_inject, grad_check, grad_check_normwise, reference, rcve_forward, rcve_sum_squares, softmax_rows,
    AttentionParams, AttnParam, DlpConfig, Matrix, ParamId, RcveDims, RcveError, RcveInputs, RcveParams, INIT_SCALE,
};

pub const ORACLE_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
/// Step sizes of the convergence sweep, largest first.
pub const SWEEP_STEPS: [f64; 3] = [1e-2, 1e-3, 1e-4];

#[derive(Debug, Clone, Default)]
pub struct SelftestOptions {
    /// A smaller subset that finishes well under five seconds.
    pub quick: bool,
    /// Scales every analytic gradient by `1 + δ` before checking (mutation test).
    pub gradient_perturbation: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed_ms: u64,
}

/// Runs every check; the results keep a fixed order.
pub fn run_selftest(opts: &SelftestOptions) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = if opts.quick { 20 } else { 100 };
    let mut out = Vec::new();
    let mut check = |name: &'static str, f: &mut dyn FnMut() -> Result<String, String>| {
        let start = Instant::now();
        let (passed, detail) = match f() {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        out.push(CheckResult { name, passed, detail, elapsed_ms: start.elapsed().as_millis() as u64 });
    };
    let perturb = opts.gradient_perturbation.unwrap_or(0.0);

    check("softmax_rows", &mut || softmax_check(&mut rng, n));
    check("attention_oracle", &mut || attention_oracle(&mut rng, n));
    check("attention_permutation", &mut || permutation(&mut rng, n));
    check("attention_convex_hull", &mut || convex_hull(&mut rng, n));
    check("rcve_oracle", &mut || rcve_oracle(&mut rng, n));
    check("reshape_bijective", &mut || reshape(&mut rng, n));
    check("grad_check", &mut || {
        let dims = RcveDims { hidden: 5, ..RcveDims::new(6, 3, 4, 2, 2) };
        gradients(dims, opts.seed, perturb)
    });
    check("grad_convergence", &mut || convergence(opts.seed, perturb));
    check("dlp_shape_law", &mut || dlp_law(&mut rng));
    check("pinned_configuration", &mut || pinned_configuration(opts.seed, perturb, opts.quick));
    out
}

fn err(e: RcveError) -> String {
    e.to_string()
}

fn random_attention(rng: &mut ChaCha8Rng) -> Result<(Matrix, Matrix, AttentionParams), RcveError> {
    let heads = rng.random_range(1..=2);
    let d = heads * rng.random_range(1..=4);
    let (d_q, d_kv, d_out) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
    let p = AttentionParams::random(d_q, d_kv, d, d_out, heads, 1.0, rng)?;
    let q = Matrix::random_uniform(rng.random_range(1..=8), d_q, 1.0, rng);
    let kv = Matrix::random_uniform(rng.random_range(1..=8), d_kv, 1.0, rng);
    Ok((q, kv, p))
}

fn softmax_check(rng: &mut ChaCha8Rng, n: usize) -> Result<String, String> {
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let m = Matrix::random_uniform(rng.random_range(1..=8), rng.random_range(1..=8), 50.0, rng);
        let s = softmax_rows(&m);
        for i in 0..s.rows() {
            worst = worst.max((s.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    if worst <= ORACLE_TOL {
        Ok(format!("max |row sum - 1| = {worst:.3e}"))
    } else {
        Err(format!("row sum off by {worst:.3e}"))
    }
}

fn attention_oracle(rng: &mut ChaCha8Rng, n: usize) -> Result<String, String> {
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let (q, kv, p) = random_attention(rng).map_err(err)?;
        let got = cross_attention(&q, &kv, &p).map_err(err)?;
        worst = worst.max(reference::max_gap(&got, &reference::attention(&q.to_rows(), &kv.to_rows(), &p)));
    }
    if worst <= ORACLE_TOL {
        Ok(format!("{n} instances, max gap {worst:.3e}"))
    } else {
        Err(format!("gap {worst:.3e} > {ORACLE_TOL:e}"))
    }
}

fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Result<String, String> {
    use rand::seq::SliceRandom;
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let (q, kv, p) = random_attention(rng).map_err(err)?;
        let mut rows = kv.to_rows();
        rows.shuffle(rng);
        let shuffled = Matrix::from_rows(&rows).map_err(err)?;
        let a = cross_attention(&q, &kv, &p).map_err(err)?;
        let b = cross_attention(&q, &shuffled, &p).map_err(err)?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    if worst <= ORACLE_TOL {
        Ok(format!("max gap {worst:.3e}"))
    } else {
        Err(format!("permuting keys changed the output by {worst:.3e}"))
    }
}

fn convex_hull(rng: &mut ChaCha8Rng, n: usize) -> Result<String, String> {
    for _ in 0..n {
        let d = rng.random_range(1..=8);
        let mut p = AttentionParams::random(rng.random_range(1..=8), rng.random_range(1..=8), d, d, 1, 1.0, rng).map_err(err)?;
        p.w_o = Matrix::identity(d);
        let q = Matrix::random_uniform(rng.random_range(1..=8), p.query_dim(), 1.0, rng);
        let kv = Matrix::random_uniform(rng.random_range(1..=8), p.kv_dim(), 1.0, rng);
        let t = cross_attention_traced(&q, &kv, &p).map_err(err)?;
        for j in 0..d {
            let col: Vec<f64> = (0..t.v.rows()).map(|i| t.v[(i, j)]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min) - ORACLE_TOL;
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max) + ORACLE_TOL;
            for i in 0..t.output.rows() {
                let x = t.output[(i, j)];
                if x < lo || x > hi {
                    return Err(format!("output {x} outside value range [{lo}, {hi}]"));
                }
            }
        }
    }
    Ok(format!("{n} instances inside the value hull"))
}

fn random_dims(rng: &mut ChaCha8Rng) -> RcveDims {
    let heads = rng.random_range(1..=2);
    RcveDims {
        c: heads * rng.random_range(1..=4),
        n_t: rng.random_range(1..=8),
        n_v: rng.random_range(1..=8),
        n_r: rng.random_range(1..=8),
        c_r: rng.random_range(1..=8),
        hidden: rng.random_range(1..=8),
        heads,
    }
}

fn rcve_oracle(rng: &mut ChaCha8Rng, n: usize) -> Result<String, String> {
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let dims = random_dims(rng);
        let p = RcveParams::random(dims, 0.5, rng).map_err(err)?;
        let x = RcveInputs::random(&dims, 1.0, rng);
        let v = rcve_forward(&x, &p).map_err(err)?;
        worst = worst.max(reference::max_gap(&v, &reference::rcve(&x, &p)));
    }
    if worst <= ORACLE_TOL {
        Ok(format!("{n} instances, max gap {worst:.3e}"))
    } else {
        Err(format!("gap {worst:.3e} > {ORACLE_TOL:e}"))
    }
}

fn reshape(rng: &mut ChaCha8Rng, n: usize) -> Result<String, String> {
    for _ in 0..n {
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let flat = Matrix::random_uniform(1, r * c, 1.0, rng);
        if flat.reshape(r, c).map_err(err)?.flatten() != flat {
            return Err(format!("flatten(reshape) differs at {r}x{c}"));
        }
    }
    Ok(format!("{n} shapes"))
}

fn analytic<'a>(
    x: &'a RcveInputs,
    p: &'a RcveParams,
    id: ParamId,
    perturb: f64,
) -> impl Fn(&Matrix) -> Result<(f64, Matrix), RcveError> + 'a {
    move |t| {
        let (loss, g) = rcve_sum_squares(x, &p.with(id, t)?)?;
        Ok((loss, g.get(id).scale(1.0 + perturb)))
    }
}

fn gradients(dims: RcveDims, seed: u64, perturb: f64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let p = RcveParams::random(dims, INIT_SCALE, &mut rng).map_err(err)?;
    let x = RcveInputs::random(&dims, 1.0, &mut rng);
    let mut worst = (0.0_f64, ParamId::ALL[0]);
    for id in ParamId::ALL {
        let e = grad_check(analytic(&x, &p, id, perturb), p.get(id), GRAD_STEP).map_err(err)?;
        if e > worst.0 {
            worst = (e, id);
        }
        if e >= GRAD_TOL {
            return Err(format!("{id}: relative error {e:.3e} >= {GRAD_TOL:e}"));
        }
    }
    Ok(format!("13 matrices, worst {} at {:.3e}", worst.1, worst.0))
}

/// The loss is quadratic in the value and output projections of the second
/// attention, so central differences are exact there up to roundoff and
/// show no truncation trend to measure.
pub fn sweep_applies(id: ParamId) -> bool {
    !matches!(id, ParamId::Attn2(AttnParam::Wv) | ParamId::Attn2(AttnParam::Wo))
}

/// Truncation error must dominate roundoff for the trend to be visible, so
/// the sweep uses unit-scale weights and the normwise error.
fn convergence(seed: u64, perturb: f64) -> Result<String, String> {
    let dims = RcveDims { hidden: 5, ..RcveDims::new(6, 3, 4, 2, 2) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ab);
    let p = RcveParams::random(dims, 1.0, &mut rng).map_err(err)?;
    let x = RcveInputs::random(&dims, 1.0, &mut rng);
    let mut worst = (0.0_f64, ParamId::ALL[0]);
    for id in ParamId::ALL.into_iter().filter(|id| sweep_applies(*id)) {
        let errs: Vec<f64> = SWEEP_STEPS
            .iter()
            .map(|h| grad_check_normwise(analytic(&x, &p, id, perturb), p.get(id), *h))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        if !errs.windows(2).all(|w| w[1] < w[0]) {
            let shown: Vec<String> = errs.iter().map(|e| format!("{e:.1e}")).collect();
            return Err(format!("{id}: error not decreasing over h = {SWEEP_STEPS:?}: {}", shown.join(", ")));
        }
        if errs[0] > worst.0 {
            worst = (errs[0], id);
        }
    }
    Ok(format!("11 matrices decreasing, largest at h={:e}: {} {:.1e}", SWEEP_STEPS[0], worst.1, worst.0))
}

fn dlp_law(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let c = 3;
    let mut cases = 0;
    for layers in 1..=4 {
        for n_p in 1..=5 {
            let cfg = DlpConfig::random(layers, n_p, c, 1.0, rng).map_err(err)?;
            for n_v in 1..=12 {
                let v = Matrix::random_uniform(n_v, c, 1.0, rng);
                for l in 0..layers {
                    let out = dlp_inject(l, &v, &cfg).map_err(err)?;
                    let p = cfg.layer(l).map_err(err)?;
                    let ok = out.rows() == n_v + 2 * n_p
                        && (0..n_v).all(|i| out.row(n_p + i) == v.row(i))
                        && (0..n_p).all(|i| out.row(i) == p.row(i) && out.row(n_p + n_v + i) == p.row(i));
                    if !ok {
                        return Err(format!("layout broken at L={layers} N_p={n_p} N_v={n_v} layer={l}"));
                    }
                    cases += 1;
                }
            }
        }
    }
    if DlpConfig::new(1, 0, c, vec![]).is_ok() {
        return Err("N_p = 0 accepted".into());
    }
    Ok(format!("{cases} cases"))
}

/// `N_p = 3`, `N_r = 16`, `C_r = 4`.
pub const PINNED_N_P: usize = 3;
pub const PINNED_N_R: usize = 16;
pub const PINNED_C_R: usize = 4;

fn pinned_configuration(seed: u64, perturb: f64, quick: bool) -> Result<String, String> {
    let dims = RcveDims::new(64, 8, 10, PINNED_N_R, PINNED_C_R);
    let p = RcveParams::seeded(dims, seed).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = RcveInputs::random(&dims, 1.0, &mut rng);
    let v = rcve_forward(&x, &p).map_err(err)?;
    if v.shape() != (PINNED_N_R, 64) {
        return Err(format!("output shape {:?}", v.shape()));
    }
    let gap = reference::max_gap(&v, &reference::rcve(&x, &p));
    if gap > ORACLE_TOL {
        return Err(format!("oracle gap {gap:.3e}"));
    }
    let cfg = DlpConfig::random(2, PINNED_N_P, 64, 0.1, &mut rng).map_err(err)?;
    let out = dlp_inject(1, &Matrix::random_uniform(10, 64, 1.0, &mut rng), &cfg).map_err(err)?;
    if out.rows() != 16 {
        return Err(format!("DLP produced {} rows", out.rows()));
    }
    // gradients at a narrower width with the same N_r and C_r
    let grads = if quick {
        "gradients skipped (quick)".to_string()
    } else {
        gradients(RcveDims::new(8, 4, 6, PINNED_N_R, PINNED_C_R), seed, perturb)?
    };
    Ok(format!("16x64 output, oracle gap {gap:.1e}, {grads}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let r = run_selftest(&SelftestOptions { quick: true, ..Default::default() });
        for c in &r {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn perturbed_gradient_fails_grad_check() {
        let r = run_selftest(&SelftestOptions { quick: true, gradient_perturbation: Some(1e-3), ..Default::default() });
        let first = r.iter().find(|c| !c.passed).unwrap();
        assert_eq!(first.name, "grad_check");
    }
}
