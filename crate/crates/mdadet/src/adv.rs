//! Adversarial feature alignment: gradient reversal, per-level domain
//! discriminators (three kernel-1 convolutions, ReLU after the first two),
//! the dense cross-entropy domain loss, and the warm-up schedule for λ.
//!
//! The combined objective L = l_class + l_box − λ·l_d is realized
//! operationally: every branch *minimizes* its own loss, and the −λ factor is
//! applied to the gradient at the discriminator input before it re-enters the
//! detector. Discriminator parameters therefore descend on l_d while the
//! backbone ascends on it, scaled by λ.

use ndarray::Array3;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::det::losses::LossBundle;
use crate::det::{DetectorConfig, Level};
use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, Conv2d, ConvCache, GradStore, ParamStore};

pub const LAMBDA_GAMMA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscMode {
    Multiclass,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub mode: DiscMode,
    pub attachment_levels: Vec<Level>,
    /// Multiclass: 1 + number of targets. Binary: 2.
    pub num_domain_classes: usize,
    /// `None` inherits the attachment level's channel width.
    #[serde(default)]
    pub hidden_channels: Option<usize>,
}

impl DiscriminatorConfig {
    /// Default setup: multiclass over source + each target, attached at C3
    /// only.
    pub fn multiclass_at_c3(num_targets: usize) -> Self {
        DiscriminatorConfig {
            mode: DiscMode::Multiclass,
            attachment_levels: vec![Level::C3],
            num_domain_classes: 1 + num_targets,
            hidden_channels: None,
        }
    }

    pub fn binary_at_c3() -> Self {
        DiscriminatorConfig {
            mode: DiscMode::Binary,
            attachment_levels: vec![Level::C3],
            num_domain_classes: 2,
            hidden_channels: None,
        }
    }

    /// Domain-id (0 = source, 1.. = targets) to discriminator class.
    pub fn domain_class(&self, domain_id: usize) -> usize {
        match self.mode {
            DiscMode::Multiclass => domain_id,
            DiscMode::Binary => usize::from(domain_id != 0),
        }
    }

    pub fn validate(&self, num_targets: usize) -> Result<()> {
        if self.attachment_levels.is_empty() {
            return Err(Error::Config("attachment_levels must be nonempty".into()));
        }
        for (i, l) in self.attachment_levels.iter().enumerate() {
            if self.attachment_levels[..i].contains(l) {
                return Err(Error::Config(format!("duplicate attachment level {l}")));
            }
        }
        match self.mode {
            DiscMode::Multiclass => {
                if self.num_domain_classes != 1 + num_targets {
                    return Err(Error::Config(format!(
                        "multiclass discriminator needs 1 + {num_targets} = {} domain classes, got {}",
                        1 + num_targets,
                        self.num_domain_classes
                    )));
                }
            }
            DiscMode::Binary => {
                if self.num_domain_classes != 2 {
                    return Err(Error::Config(format!(
                        "binary discriminator needs 2 domain classes, got {}",
                        self.num_domain_classes
                    )));
                }
            }
        }
        if self.num_domain_classes < 2 {
            return Err(Error::Config("need at least 2 domain classes".into()));
        }
        if self.hidden_channels == Some(0) {
            return Err(Error::Config("hidden_channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// λ(p) = 2 / (1 + exp(−γ p)) − 1 with γ = 10: zero at the start of
/// training, saturating just below 1 at the end.
pub fn lambda_schedule(progress: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::Validation(format!(
            "training progress {progress} outside [0, 1]"
        )));
    }
    Ok(2.0 / (1.0 + (-LAMBDA_GAMMA * progress).exp()) - 1.0)
}

/// GRL forward: the identity, kept explicit so call sites document where the
/// reversal sits.
pub fn grl_forward(features: &Array3<f64>) -> Array3<f64> {
    features.clone()
}

/// GRL backward: the incoming gradient scaled by −λ. With λ = 0 the branch
/// is fully detached.
pub fn grl_backward(grad: &Array3<f64>, lambda_value: f64) -> Array3<f64> {
    grad.mapv(|g| -lambda_value * g)
}

/// The combined stage-2 objective, for reporting.
pub fn total_loss(det: &LossBundle, l_d: f64, lambda_value: f64) -> Result<f64> {
    let v = det.l_class + det.l_box - lambda_value * l_d;
    if !v.is_finite() {
        return Err(Error::numeric("total_loss", "non-finite objective"));
    }
    Ok(v)
}

/// Mean cross-entropy over all spatial locations against one domain class,
/// plus the gradient with respect to the logits.
pub fn domain_loss(logits: &Array3<f64>, true_class: usize) -> Result<(f64, Array3<f64>)> {
    let (k, h, w) = logits.dim();
    if true_class >= k {
        return Err(Error::Validation(format!(
            "domain class {true_class} out of range for {k} logit channels"
        )));
    }
    let n = (h * w) as f64;
    let mut loss = 0.0;
    let mut grad = Array3::<f64>::zeros((k, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut maxv = f64::NEG_INFINITY;
            for c in 0..k {
                maxv = maxv.max(logits[[c, y, x]]);
            }
            let mut denom = 0.0;
            for c in 0..k {
                denom += (logits[[c, y, x]] - maxv).exp();
            }
            let log_denom = denom.ln();
            loss += -(logits[[true_class, y, x]] - maxv - log_denom);
            for c in 0..k {
                let p = (logits[[c, y, x]] - maxv).exp() / denom;
                let onehot = f64::from(c == true_class);
                grad[[c, y, x]] = (p - onehot) / n;
            }
        }
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::numeric("domain_loss", "non-finite domain loss"));
    }
    Ok((loss, grad))
}

/// Fraction of spatial locations whose argmax logit equals `true_class`
/// (ties resolve to the lowest channel).
pub fn domain_accuracy(logits: &Array3<f64>, true_class: usize) -> f64 {
    let (k, h, w) = logits.dim();
    let mut hits = 0usize;
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            for c in 1..k {
                if logits[[c, y, x]] > logits[[best, y, x]] {
                    best = c;
                }
            }
            hits += usize::from(best == true_class);
        }
    }
    hits as f64 / (h * w) as f64
}

pub struct DiscCache {
    cc1: ConvCache,
    r1: Array3<f64>,
    cc2: ConvCache,
    r2: Array3<f64>,
    cc3: ConvCache,
}

/// One per attachment level: three pointwise convolutions, ReLU after the
/// first two, raw logits out.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub level: Level,
    pub c_in: usize,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

impl Discriminator {
    pub fn build(
        cfg: &DiscriminatorConfig,
        det_cfg: &DetectorConfig,
        level: Level,
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let c_in = det_cfg.channels_at(level);
        let hidden = cfg.hidden_channels.unwrap_or(c_in);
        let name = |layer: &str| format!("adv.{level}.{layer}");
        Discriminator {
            level,
            c_in,
            conv1: Conv2d::new(ps, &name("conv1"), c_in, hidden, 1, 1, 0, rng),
            conv2: Conv2d::new(ps, &name("conv2"), hidden, hidden, 1, 1, 0, rng),
            conv3: Conv2d::new(ps, &name("conv3"), hidden, cfg.num_domain_classes, 1, 1, 0, rng),
        }
    }

    /// Builds one discriminator per configured attachment level, in config
    /// order.
    pub fn build_all(
        cfg: &DiscriminatorConfig,
        det_cfg: &DetectorConfig,
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Discriminator> {
        cfg.attachment_levels
            .iter()
            .map(|&l| Discriminator::build(cfg, det_cfg, l, ps, rng))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.conv1.num_params() + self.conv2.num_params() + self.conv3.num_params()
    }

    pub fn forward_cached(
        &self,
        ps: &ParamStore,
        features: &Array3<f64>,
    ) -> Result<(Array3<f64>, DiscCache)> {
        let (c, _, _) = features.dim();
        if c != self.c_in {
            return Err(Error::Shape(format!(
                "discriminator at {} expects {} input channels, got {c}",
                self.level, self.c_in
            )));
        }
        let (y1, cc1) = self.conv1.forward_cached(ps, features);
        let r1 = relu(&y1);
        let (y2, cc2) = self.conv2.forward_cached(ps, &r1);
        let r2 = relu(&y2);
        let (logits, cc3) = self.conv3.forward_cached(ps, &r2);
        Ok((
            logits,
            DiscCache {
                cc1,
                r1,
                cc2,
                r2,
                cc3,
            },
        ))
    }

    pub fn forward(&self, ps: &ParamStore, features: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(self.forward_cached(ps, features)?.0)
    }

    /// Backprop from logit gradients to the input-feature gradient,
    /// accumulating parameter gradients. The caller applies [`grl_backward`]
    /// to the returned tensor before handing it to the detector.
    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &DiscCache,
        dlogits: &Array3<f64>,
        grads: &mut GradStore,
    ) -> Array3<f64> {
        let d2 = self.conv3.backward(ps, &cache.cc3, dlogits, grads);
        let d2m = relu_backward(&cache.r2, &d2);
        let d1 = self.conv2.backward(ps, &cache.cc2, &d2m, grads);
        let d1m = relu_backward(&cache.r1, &d1);
        self.conv1.backward(ps, &cache.cc1, &d1m, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_grads, GradCheckSettings};
    use crate::rng::{gauss, stream, StreamId};

    fn test_rng() -> ChaCha8Rng {
        stream(5, StreamId::Test)
    }

    #[test]
    fn grl_identity_and_reversal() {
        let mut rng = test_rng();
        let x = Array3::from_shape_fn((4, 3, 3), |_| gauss(&mut rng));
        // Forward is the identity, bit for bit.
        assert_eq!(grl_forward(&x), x);

        let g = Array3::from_elem((4, 3, 3), 2.0);
        let back = grl_backward(&g, 0.5);
        assert!(back.iter().all(|&v| v == -1.0));
        assert!(grl_backward(&g, 0.0).iter().all(|&v| v == 0.0));
        assert!(grl_backward(&g, 1.0).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn lambda_schedule_values() {
        assert_eq!(lambda_schedule(0.0).unwrap(), 0.0);
        let l_half = lambda_schedule(0.5).unwrap();
        assert!((l_half - 0.98661).abs() < 5e-6, "{l_half}");
        let l_one = lambda_schedule(1.0).unwrap();
        assert!((l_one - 0.99991).abs() < 5e-6, "{l_one}");
        assert!(l_one < 1.0);
        assert!(lambda_schedule(-0.01).is_err());
        assert!(lambda_schedule(1.01).is_err());

        let mut prev = -1.0;
        for i in 0..=1000 {
            let l = lambda_schedule(i as f64 / 1000.0).unwrap();
            assert!(l > prev, "schedule not strictly increasing at {i}");
            prev = l;
        }
    }

    #[test]
    fn domain_loss_hand_values() {
        // Uniform logits over 3 classes: loss = ln 3 everywhere.
        let logits = Array3::<f64>::zeros((3, 2, 2));
        let (l, grad) = domain_loss(&logits, 1).unwrap();
        assert!((l - 3.0f64.ln()).abs() < 1e-15);
        // grad: (1/3 - onehot) / 4 locations
        assert!((grad[[0, 0, 0]] - (1.0 / 3.0) / 4.0).abs() < 1e-15);
        assert!((grad[[1, 0, 0]] - (1.0 / 3.0 - 1.0) / 4.0).abs() < 1e-15);

        // Hand-built 2-location, 3-class map.
        let mut logits = Array3::<f64>::zeros((3, 1, 2));
        logits[[0, 0, 0]] = 1.0;
        logits[[1, 0, 0]] = 2.0;
        logits[[2, 0, 0]] = 3.0;
        logits[[0, 0, 1]] = -1.0;
        logits[[1, 0, 1]] = 0.0;
        logits[[2, 0, 1]] = 1.0;
        // location 0, class 2: -ln(e^3/(e^1+e^2+e^3))
        // location 1, class 2: -ln(e^1/(e^-1+e^0+e^1)) (same shifted logits)
        let ce = |z: [f64; 3], t: usize| {
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            -(z[t].exp() / denom).ln()
        };
        let want = 0.5 * (ce([1.0, 2.0, 3.0], 2) + ce([-1.0, 0.0, 1.0], 2));
        let (l, _) = domain_loss(&logits, 2).unwrap();
        assert!((l - want).abs() < 1e-12);

        // Saturated correct logit drives the loss toward zero.
        let mut sat = Array3::<f64>::zeros((3, 1, 1));
        sat[[1, 0, 0]] = 60.0;
        let (l, _) = domain_loss(&sat, 1).unwrap();
        assert!(l < 1e-12);

        assert!(domain_loss(&logits, 3).is_err());
    }

    #[test]
    fn domain_loss_grad_matches_fd_and_probs_normalize() {
        let mut rng = test_rng();
        let logits = Array3::from_shape_fn((4, 2, 3), |_| gauss(&mut rng));
        let (_, grad) = domain_loss(&logits, 2).unwrap();

        // FD on a few entries
        let eps = 1e-6;
        for &(c, y, x) in &[(0usize, 0usize, 0usize), (2, 1, 1), (3, 0, 2)] {
            let mut lp = logits.clone();
            lp[[c, y, x]] += eps;
            let mut lm = logits.clone();
            lm[[c, y, x]] -= eps;
            let fd = (domain_loss(&lp, 2).unwrap().0 - domain_loss(&lm, 2).unwrap().0)
                / (2.0 * eps);
            assert!((grad[[c, y, x]] - fd).abs() < 1e-8);
        }

        // Per-location probabilities recovered from the gradient sum to 1.
        let n = 6.0;
        for y in 0..2 {
            for x in 0..3 {
                let mut s = 0.0;
                for c in 0..4 {
                    let onehot = f64::from(c == 2);
                    s += grad[[c, y, x]] * n + onehot;
                }
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn total_loss_hand_values() {
        let det = LossBundle {
            l_class: 1.0,
            l_box: 0.5,
        };
        assert!((total_loss(&det, 0.2, 0.1).unwrap() - 1.48).abs() < 1e-15);
        assert_eq!(total_loss(&det, 0.7, 0.0).unwrap(), 1.5);
        assert_eq!(total_loss(&det, 0.0, 0.9).unwrap(), 1.5);
        let bad = LossBundle {
            l_class: f64::NAN,
            l_box: 0.0,
        };
        assert!(total_loss(&bad, 0.0, 0.0).is_err());
    }

    #[test]
    fn discriminator_shapes_and_mismatch() {
        let det_cfg = DetectorConfig {
            stage_channels: [64, 80, 96],
            ..DetectorConfig::default()
        };
        let cfg = DiscriminatorConfig::multiclass_at_c3(2);
        cfg.validate(2).unwrap();
        let mut ps = ParamStore::new();
        let disc = Discriminator::build(&cfg, &det_cfg, Level::C3, &mut ps, &mut test_rng());
        let x = Array3::<f64>::zeros((64, 8, 8));
        let logits = disc.forward(&ps, &x).unwrap();
        assert_eq!(logits.dim(), (3, 8, 8));
        // spatial size preserved for any input
        let x2 = Array3::<f64>::zeros((64, 5, 11));
        assert_eq!(disc.forward(&ps, &x2).unwrap().dim(), (3, 5, 11));

        let bcfg = DiscriminatorConfig::binary_at_c3();
        let mut ps2 = ParamStore::new();
        let bdisc = Discriminator::build(&bcfg, &det_cfg, Level::C3, &mut ps2, &mut test_rng());
        assert_eq!(bdisc.forward(&ps2, &x).unwrap().dim(), (2, 8, 8));

        let wrong = Array3::<f64>::zeros((32, 8, 8));
        assert!(disc.forward(&ps, &wrong).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = DiscriminatorConfig::multiclass_at_c3(2);
        assert!(cfg.validate(2).is_ok());
        assert!(cfg.validate(1).is_err()); // K = 3 but only 1 target
        cfg.attachment_levels = vec![];
        assert!(cfg.validate(2).is_err());
        cfg.attachment_levels = vec![Level::C3, Level::C3];
        assert!(cfg.validate(2).is_err());

        let mut b = DiscriminatorConfig::binary_at_c3();
        assert!(b.validate(5).is_ok()); // binary ignores target count
        b.num_domain_classes = 3;
        assert!(b.validate(2).is_err());
    }

    #[test]
    fn binary_and_two_class_multiclass_agree_with_one_target() {
        // With D = 1 both modes are 2-way classifiers mapping source -> 0,
        // target -> 1; identical parameters give identical losses.
        let m = DiscriminatorConfig::multiclass_at_c3(1);
        let b = DiscriminatorConfig::binary_at_c3();
        assert_eq!(m.num_domain_classes, b.num_domain_classes);
        for domain_id in 0..2 {
            assert_eq!(m.domain_class(domain_id), b.domain_class(domain_id));
        }
        let det_cfg = DetectorConfig::tiny(2);
        let mut ps_m = ParamStore::new();
        let dm = Discriminator::build(&m, &det_cfg, Level::C3, &mut ps_m, &mut test_rng());
        let mut ps_b = ParamStore::new();
        let db = Discriminator::build(&b, &det_cfg, Level::C3, &mut ps_b, &mut test_rng());
        assert_eq!(ps_m.flatten(), ps_b.flatten());
        let mut rng = test_rng();
        let x = Array3::from_shape_fn((det_cfg.stage_channels[0], 3, 3), |_| gauss(&mut rng));
        let lm = domain_loss(&dm.forward(&ps_m, &x).unwrap(), 1).unwrap().0;
        let lb = domain_loss(&db.forward(&ps_b, &x).unwrap(), 1).unwrap().0;
        assert_eq!(lm, lb);
    }

    #[test]
    fn discriminator_gradcheck() {
        let det_cfg = DetectorConfig::tiny(2);
        let cfg = DiscriminatorConfig::multiclass_at_c3(2);
        let mut ps = ParamStore::new();
        let disc = Discriminator::build(&cfg, &det_cfg, Level::C3, &mut ps, &mut test_rng());
        let mut rng = test_rng();
        let x = Array3::from_shape_fn((det_cfg.stage_channels[0], 4, 4), |_| gauss(&mut rng));

        let mut grads = GradStore::zeros_like(&ps);
        let (logits, cache) = disc.forward_cached(&ps, &x).unwrap();
        let (_, dlogits) = domain_loss(&logits, 1).unwrap();
        let _dx = disc.backward(&ps, &cache, &dlogits, &mut grads);

        let loss_fn = |ps: &ParamStore| {
            let logits = disc.forward(ps, &x).unwrap();
            domain_loss(&logits, 1).unwrap().0
        };
        let report = check_grads(&ps, &grads.flatten(), GradCheckSettings::default(), loss_fn);
        assert_eq!(report.failures, 0, "worst {:?}", report.worst);
    }

    #[test]
    fn grl_scaling_commutes_through_backprop_for_pow2_lambda() {
        // Gradient of the domain loss w.r.t. a pre-GRL parameter must equal
        // -λ times the gradient with the GRL replaced by identity. For λ in
        // {0, 0.5, 1} (exact powers of two) this holds bit-for-bit.
        let mut rng = test_rng();
        let mut ps = ParamStore::new();
        let pre = Conv2d::new(&mut ps, "pre", 2, 3, 3, 1, 1, &mut rng);
        let det_cfg = DetectorConfig {
            stage_channels: [3, 4, 5],
            ..DetectorConfig::tiny(2)
        };
        let cfg = DiscriminatorConfig::multiclass_at_c3(1);
        let disc = Discriminator::build(&cfg, &det_cfg, Level::C3, &mut ps, &mut rng);
        let x = Array3::from_shape_fn((2, 5, 5), |_| gauss(&mut rng));

        let run = |lambda: Option<f64>| -> Vec<f64> {
            let mut grads = GradStore::zeros_like(&ps);
            let (feat_pre, cc) = pre.forward_cached(&ps, &x);
            let feat = grl_forward(&feat_pre);
            let (logits, cache) = disc.forward_cached(&ps, &feat).unwrap();
            let (_, dlogits) = domain_loss(&logits, 1).unwrap();
            let dfeat = disc.backward(&ps, &cache, &dlogits, &mut grads);
            let dpre = match lambda {
                Some(l) => grl_backward(&dfeat, l),
                None => dfeat, // GRL replaced by identity
            };
            pre.backward(&ps, &cc, &dpre, &mut grads);
            grads.flatten()
        };

        let identity = run(None);
        for &lambda in &[0.0, 0.5, 1.0] {
            let reversed = run(Some(lambda));
            for (r, i) in reversed.iter().zip(&identity) {
                // pre-conv params occupy the prefix of the store; disc params
                // must be identical (GRL does not touch them), pre params
                // exactly scaled.
                let scaled = -lambda * i;
                assert!(
                    (*r == scaled) || (*r == *i),
                    "lambda {lambda}: got {r}, identity {i}"
                );
            }
            // and specifically the pre-conv weight block is the scaled one
            let n_pre = pre.num_params();
            for k in 0..n_pre {
                assert_eq!(reversed[k], -lambda * identity[k], "index {k}");
            }
            for k in n_pre..identity.len() {
                assert_eq!(reversed[k], identity[k], "disc index {k}");
            }
        }
    }
}
