//! Projection of Euclidean modality features into the ball and
//! tangent-space fusion of the three modality queries.

use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::Matrix;
use crate::poincare::{
    exp_map_origin, log_map_origin, PoincarePoint, TangentVector,
};
use crate::rng::standard_normal;
use crate::tape::LN_EPS;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueryError {
    #[error("feature has dimension {found}, head expects {expected}")]
    FeatureDim { found: usize, expected: usize },
    #[error("query dimensions disagree: {0} vs {1}")]
    QueryDim(usize, usize),
    #[error("feature contains a non-finite entry")]
    NonFinite,
}

/// Upstream encoder outputs for one sample, one vector per modality.
#[derive(Debug, Clone)]
pub struct ModalityFeatures {
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
}

impl ModalityFeatures {
    pub fn new(audio: Vec<f64>, visual: Vec<f64>, text: Vec<f64>) -> Result<Self, QueryError> {
        for v in audio.iter().chain(&visual).chain(&text) {
            if !v.is_finite() {
                return Err(QueryError::NonFinite);
            }
        }
        Ok(ModalityFeatures { audio, visual, text })
    }
}

/// Linear layer + LayerNorm projecting one modality into the tangent space.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    /// `d_h x d_in`.
    pub weight: Matrix,
    /// `1 x d_h`.
    pub bias: Matrix,
    pub norm_gain: Matrix,
    pub norm_bias: Matrix,
}

impl ProjectionHead {
    /// Gaussian weights (std 0.02), zero bias, unit gain, zero norm bias.
    pub fn init<R: rand::Rng>(d_h: usize, d_in: usize, rng: &mut R) -> Self {
        let weight = Matrix::from_vec(
            d_h,
            d_in,
            (0..d_h * d_in).map(|_| standard_normal(rng) * 0.02).collect(),
        );
        ProjectionHead {
            weight,
            bias: Matrix::zeros(1, d_h),
            norm_gain: Matrix::from_vec(1, d_h, vec![1.0; d_h]),
            norm_bias: Matrix::zeros(1, d_h),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `exp_0(layer_norm(W x + b))`.
    pub fn project(&self, feat: &[f64]) -> Result<PoincarePoint, QueryError> {
        if feat.len() != self.input_dim() {
            return Err(QueryError::FeatureDim {
                found: feat.len(),
                expected: self.input_dim(),
            });
        }
        if !feat.iter().all(|v| v.is_finite()) {
            return Err(QueryError::NonFinite);
        }
        let d_h = self.output_dim();
        let mut pre = vec![0.0; d_h];
        for (r, out) in pre.iter_mut().enumerate() {
            *out = crate::matrix::dot(self.weight.row(r), feat) + self.bias.get(0, r);
        }
        let normed = layer_norm(
            &pre,
            self.norm_gain.row(0),
            self.norm_bias.row(0),
        );
        let v = TangentVector::new(normed).expect("layer norm output is finite");
        Ok(exp_map_origin(&v))
    }
}

/// Per-vector layer normalization with learnable gain and bias.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / libm::sqrt(var + LN_EPS);
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (v - mean) * inv_std * g + b)
        .collect()
}

/// Learnable pre-softmax logits for the three modality weights.
#[derive(Debug, Clone)]
pub struct FusionWeights {
    pub theta: [f64; 3],
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights { theta: [0.0; 3] }
    }
}

impl FusionWeights {
    /// `softmax(theta)`: positive weights summing to one,
    /// ordered (audio, visual, text).
    pub fn alphas(&self) -> [f64; 3] {
        let m = self.theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.theta.iter().map(|t| libm::exp(t - m)).collect();
        let s: f64 = e.iter().sum();
        [e[0] / s, e[1] / s, e[2] / s]
    }
}

/// Per-modality ball queries plus their tangent-space fusion.
#[derive(Debug, Clone)]
pub struct SampleQueries {
    pub audio_q: PoincarePoint,
    pub visual_q: PoincarePoint,
    pub text_q: PoincarePoint,
    pub fused_q: PoincarePoint,
}

impl SampleQueries {
    pub fn dim(&self) -> usize {
        self.fused_q.dim()
    }

    pub fn by_modality(&self) -> [&PoincarePoint; 3] {
        [&self.audio_q, &self.visual_q, &self.text_q]
    }
}

/// `exp_0(alpha_a log_0(q_a) + alpha_v log_0(q_v) + alpha_t log_0(q_t))`.
pub fn fuse_queries(
    audio_q: &PoincarePoint,
    visual_q: &PoincarePoint,
    text_q: &PoincarePoint,
    w: &FusionWeights,
) -> Result<PoincarePoint, QueryError> {
    let d = audio_q.dim();
    if visual_q.dim() != d || text_q.dim() != d {
        return Err(QueryError::QueryDim(d, visual_q.dim().max(text_q.dim())));
    }
    let [aa, av, at] = w.alphas();
    let la = log_map_origin(audio_q);
    let lv = log_map_origin(visual_q);
    let lt = log_map_origin(text_q);
    let mixed: Vec<f64> = (0..d)
        .map(|i| aa * la.coords()[i] + av * lv.coords()[i] + at * lt.coords()[i])
        .collect();
    Ok(exp_map_origin(
        &TangentVector::new(mixed).expect("finite fusion"),
    ))
}

/// The three projection heads and the shared fusion weights.
#[derive(Debug, Clone)]
pub struct QueryEncoder {
    pub audio_head: ProjectionHead,
    pub visual_head: ProjectionHead,
    pub text_head: ProjectionHead,
    pub fusion: FusionWeights,
}

impl QueryEncoder {
    pub fn init<R: rand::Rng>(
        d_h: usize,
        d_audio: usize,
        d_visual: usize,
        d_text: usize,
        rng: &mut R,
    ) -> Self {
        QueryEncoder {
            audio_head: ProjectionHead::init(d_h, d_audio, rng),
            visual_head: ProjectionHead::init(d_h, d_visual, rng),
            text_head: ProjectionHead::init(d_h, d_text, rng),
            fusion: FusionWeights::default(),
        }
    }

    pub fn encode(&self, feats: &ModalityFeatures) -> Result<SampleQueries, QueryError> {
        let audio_q = self.audio_head.project(&feats.audio)?;
        let visual_q = self.visual_head.project(&feats.visual)?;
        let text_q = self.text_head.project(&feats.text)?;
        let fused_q = fuse_queries(&audio_q, &visual_q, &text_q, &self.fusion)?;
        Ok(SampleQueries {
            audio_q,
            visual_q,
            text_q,
            fused_q,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poincare::geodesic_distance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_head(d: usize) -> ProjectionHead {
        ProjectionHead {
            weight: Matrix::identity(d),
            bias: Matrix::zeros(1, d),
            norm_gain: Matrix::from_vec(1, d, vec![1.0; d]),
            norm_bias: Matrix::zeros(1, d),
        }
    }

    fn point(coords: &[f64]) -> PoincarePoint {
        PoincarePoint::new(coords.to_vec()).unwrap()
    }

    #[test]
    fn identity_head_on_zero_feature_gives_origin() {
        let head = identity_head(4);
        let p = head.project(&[0.0; 4]).unwrap();
        assert_eq!(p.coords(), &[0.0; 4]);
    }

    #[test]
    fn projection_is_inside_ball_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = ProjectionHead::init(6, 9, &mut rng);
        let feat: Vec<f64> = (0..9).map(|i| (i as f64) * 0.37 - 1.2).collect();
        let p1 = head.project(&feat).unwrap();
        let p2 = head.project(&feat).unwrap();
        assert!(p1.norm() < 1.0);
        assert_eq!(p1.coords(), p2.coords());
    }

    #[test]
    fn projection_rejects_wrong_dimension() {
        let head = identity_head(4);
        assert!(matches!(
            head.project(&[1.0; 3]),
            Err(QueryError::FeatureDim { found: 3, expected: 4 })
        ));
    }

    #[test]
    fn degenerate_fusion_weights_select_one_modality() {
        let qa = point(&[0.3, 0.1]);
        let qv = point(&[-0.2, 0.4]);
        let qt = point(&[0.0, -0.5]);
        let w = FusionWeights { theta: [20.0, -20.0, -20.0] };
        let fused = fuse_queries(&qa, &qv, &qt, &w).unwrap();
        let d = geodesic_distance(&fused, &qa).unwrap();
        assert!(d < 1e-6, "fused should collapse to the audio query, d = {d}");
    }

    #[test]
    fn fusing_three_equal_queries_is_identity() {
        let p = point(&[0.25, -0.3, 0.1]);
        let w = FusionWeights { theta: [0.3, -0.7, 1.1] };
        let fused = fuse_queries(&p, &p, &p, &w).unwrap();
        for (a, b) in fused.coords().iter().zip(p.coords()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_fusion_averages_tangents() {
        let va = TangentVector::new(vec![0.4, 0.0]).unwrap();
        let vv = TangentVector::new(vec![0.0, 0.6]).unwrap();
        let vt = TangentVector::new(vec![-0.3, 0.3]).unwrap();
        let qa = exp_map_origin(&va);
        let qv = exp_map_origin(&vv);
        let qt = exp_map_origin(&vt);
        let fused = fuse_queries(&qa, &qv, &qt, &FusionWeights::default()).unwrap();

        let mean = TangentVector::new(
            (0..2)
                .map(|i| (va.coords()[i] + vv.coords()[i] + vt.coords()[i]) / 3.0)
                .collect(),
        )
        .unwrap();
        let expected = exp_map_origin(&mean);
        for (a, b) in fused.coords().iter().zip(expected.coords()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_is_permutation_consistent() {
        let qa = point(&[0.3, 0.1]);
        let qv = point(&[-0.2, 0.4]);
        let qt = point(&[0.0, -0.5]);
        let w = FusionWeights { theta: [0.2, -0.4, 0.9] };
        let f1 = fuse_queries(&qa, &qv, &qt, &w).unwrap();
        // Swap audio and text together with their logits.
        let w2 = FusionWeights { theta: [0.9, -0.4, 0.2] };
        let f2 = fuse_queries(&qt, &qv, &qa, &w2).unwrap();
        for (a, b) in f1.coords().iter().zip(f2.coords()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let w1 = FusionWeights { theta: [0.1, 0.5, -0.3] };
        let w2 = FusionWeights { theta: [7.1, 7.5, 6.7] };
        let a1 = w1.alphas();
        let a2 = w2.alphas();
        for (x, y) in a1.iter().zip(&a2) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a1.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let qa = point(&[0.3, 0.1]);
        let qv = point(&[-0.2, 0.4]);
        let qt = point(&[0.0, -0.5]);
        let f1 = fuse_queries(&qa, &qv, &qt, &w1).unwrap();
        let f2 = fuse_queries(&qa, &qv, &qt, &w2).unwrap();
        for (a, b) in f1.coords().iter().zip(f2.coords()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
