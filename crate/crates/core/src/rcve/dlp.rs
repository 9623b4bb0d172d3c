use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::RcveError;

/// Learnable per-layer prompts, `L×N_p×C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDlp", into = "RawDlp")]
pub struct DlpConfig {
    layers: usize,
    prompts_per_layer: usize,
    hidden: usize,
    prompts: Vec<Matrix>,
}

#[derive(Serialize, Deserialize)]
struct RawDlp {
    layers: usize,
    prompts_per_layer: usize,
    hidden: usize,
    /// Row-major `L·N_p·C` entries.
    data: Vec<f64>,
}

impl TryFrom<RawDlp> for DlpConfig {
    type Error = RcveError;

    fn try_from(r: RawDlp) -> Result<Self, RcveError> {
        DlpConfig::new(r.layers, r.prompts_per_layer, r.hidden, r.data)
    }
}

impl From<DlpConfig> for RawDlp {
    fn from(c: DlpConfig) -> Self {
        let data = c.prompts.iter().flat_map(|m| m.as_slice().to_vec()).collect();
        RawDlp { layers: c.layers, prompts_per_layer: c.prompts_per_layer, hidden: c.hidden, data }
    }
}

impl DlpConfig {
    /// `data` holds `layers·prompts_per_layer·hidden` entries, layer-major.
    pub fn new(layers: usize, prompts_per_layer: usize, hidden: usize, data: Vec<f64>) -> Result<Self, RcveError> {
        if layers == 0 || prompts_per_layer == 0 || hidden == 0 {
            return Err(RcveError::InvalidConfig(format!(
                "prompt tensor dims must be positive, got {layers}x{prompts_per_layer}x{hidden}"
            )));
        }
        let per = prompts_per_layer * hidden;
        if data.len() != layers * per {
            return Err(RcveError::ShapeMismatch {
                what: "prompt tensor".into(),
                expected: format!("{} entries ({layers}x{prompts_per_layer}x{hidden})", layers * per),
                actual: format!("{} entries", data.len()),
            });
        }
        let prompts = data
            .chunks(per)
            .map(|c| Matrix::from_vec(prompts_per_layer, hidden, c.to_vec()))
            .collect::<Result<_, _>>()?;
        Ok(DlpConfig { layers, prompts_per_layer, hidden, prompts })
    }

    pub fn random<R: Rng + ?Sized>(
        layers: usize,
        prompts_per_layer: usize,
        hidden: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self, RcveError> {
        let n = layers * prompts_per_layer * hidden;
        let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        DlpConfig::new(layers, prompts_per_layer, hidden, data)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn prompts_per_layer(&self) -> usize {
        self.prompts_per_layer
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// `P_l`, `N_p×C`.
    pub fn layer(&self, layer: usize) -> Result<&Matrix, RcveError> {
        self.prompts.get(layer).ok_or(RcveError::LayerOutOfRange { layer, layers: self.layers })
    }
}

/// `[P_l ; visual ; P_l]`: the same prompt block at both ends.
pub fn dlp_inject(layer: usize, visual: &Matrix, cfg: &DlpConfig) -> Result<Matrix, RcveError> {
    let p = cfg.layer(layer)?;
    if visual.cols() != cfg.hidden {
        return Err(RcveError::ShapeMismatch {
            what: "visual width".into(),
            expected: cfg.hidden.to_string(),
            actual: visual.cols().to_string(),
        });
    }
    Matrix::vstack(&[p, visual, p])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_prompts_around_ten_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DlpConfig::random(2, 3, 5, 0.1, &mut rng).unwrap();
        let v = Matrix::random_uniform(10, 5, 1.0, &mut rng);
        let out = dlp_inject(1, &v, &cfg).unwrap();
        assert_eq!(out.shape(), (16, 5));
        for i in 0..10 {
            assert_eq!(out.row(i + 3), v.row(i));
        }
        for i in 0..3 {
            assert_eq!(out.row(i), cfg.layer(1).unwrap().row(i));
            assert_eq!(out.row(13 + i), cfg.layer(1).unwrap().row(i));
        }
    }

    #[test]
    fn construction_errors() {
        assert!(DlpConfig::new(2, 0, 4, vec![]).is_err());
        assert!(matches!(DlpConfig::new(1, 1, 2, vec![1.0]), Err(RcveError::ShapeMismatch { .. })));
        let cfg = DlpConfig::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(dlp_inject(1, &Matrix::zeros(1, 2), &cfg), Err(RcveError::LayerOutOfRange { .. })));
        assert!(matches!(dlp_inject(0, &Matrix::zeros(1, 3), &cfg), Err(RcveError::ShapeMismatch { .. })));
    }

    #[test]
    fn serde_round_trip() {
        let cfg = DlpConfig::random(2, 2, 3, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let back: DlpConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
