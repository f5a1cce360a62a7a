//! Flow evaluation metrics: endpoint error, outlier rate, and the two
//! event-alignment ratios (variance of the warped count image, squared
//! average timestamps), both normalized so the identity flow scores 1.

use crate::error::{Error, Result};
use crate::event::EventVolume;
use crate::loss::{loss_at, T_END};
use crate::motion::{plain_count_iwe, FlowField};
use crate::synth::GroundTruthFlow;
use ndarray::Array2;

/// Pixels that count for endpoint-error metrics: valid ground truth and at
/// least one event in the volume.
#[derive(Debug, Clone)]
pub struct EvalMask {
    pub mask: Array2<bool>,
}

impl EvalMask {
    pub fn new(gt: &GroundTruthFlow, v: &EventVolume) -> Self {
        let mut mask = Array2::from_elem(gt.valid.dim(), false);
        for e in v.events() {
            let (y, x) = (e.y as usize, e.x as usize);
            if gt.valid[[y, x]] {
                mask[[y, x]] = true;
            }
        }
        Self { mask }
    }

    /// All-true mask (used by tests and synthetic baselines).
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            mask: Array2::from_elem((h, w), true),
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn endpoint_errors(pred: &FlowField, gt: &FlowField, mask: &EvalMask) -> Result<Vec<(f64, f64)>> {
    if pred.data.dim() != gt.data.dim() {
        return Err(Error::ShapeMismatch {
            context: "endpoint error inputs".to_string(),
            expected: format!("{:?}", gt.data.dim()),
            got: format!("{:?}", pred.data.dim()),
        });
    }
    let (h, w) = mask.mask.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.mask[[y, x]] {
                continue;
            }
            let (pu, pv) = pred.at(y, x);
            let (gu, gv) = gt.at(y, x);
            let ee = ((pu - gu).powi(2) + (pv - gv).powi(2)).sqrt();
            let gmag = (gu * gu + gv * gv).sqrt();
            out.push((ee, gmag));
        }
    }
    if out.is_empty() {
        return Err(Error::UndefinedMetric(
            "endpoint error over an empty mask".to_string(),
        ));
    }
    Ok(out)
}

/// Mean endpoint error over masked pixels.
pub fn aee(pred: &FlowField, gt: &GroundTruthFlow, mask: &EvalMask) -> Result<f64> {
    let errs = endpoint_errors(pred, &gt.flow, mask)?;
    Ok(errs.iter().map(|(ee, _)| ee).sum::<f64>() / errs.len() as f64)
}

/// Percentage of masked pixels whose endpoint error exceeds both
/// `threshold` pixels and 5% of the ground-truth magnitude.
pub fn outlier_rate_with_threshold(
    pred: &FlowField,
    gt: &GroundTruthFlow,
    mask: &EvalMask,
    threshold: f64,
) -> Result<f64> {
    let errs = endpoint_errors(pred, &gt.flow, mask)?;
    let outliers = errs
        .iter()
        .filter(|(ee, gmag)| *ee > threshold && *ee > 0.05 * gmag)
        .count();
    Ok(100.0 * outliers as f64 / errs.len() as f64)
}

/// Outlier rate at the standard 3-pixel threshold.
pub fn outlier_rate(pred: &FlowField, gt: &GroundTruthFlow, mask: &EvalMask) -> Result<f64> {
    outlier_rate_with_threshold(pred, gt, mask, 3.0)
}

fn variance(a: &Array2<f64>) -> f64 {
    let n = a.len() as f64;
    let mean = a.sum() / n;
    a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Variance ratio of the polarity-summed count image, warped versus
/// unwarped, at the volume-end reference time. Above 1 means the flow
/// sharpens the events.
pub fn fwl(v: &EventVolume, u: &FlowField) -> Result<f64> {
    let sensor = v.sensor;
    let warped = plain_count_iwe(v, u, T_END)?.total();
    let baseline = plain_count_iwe(v, &FlowField::zeros(sensor.h, sensor.w), T_END)?.total();
    let var0 = variance(&baseline);
    if var0 <= 0.0 {
        return Err(Error::UndefinedMetric(
            "count-image variance ratio with a zero-variance baseline".to_string(),
        ));
    }
    Ok(variance(&warped) / var0)
}

/// Ratio of summed squared average timestamps, warped versus unwarped, at
/// the given reference time. Below 1 means the flow improves alignment.
pub fn rsat_at(v: &EventVolume, u: &FlowField, t_ref: f64) -> Result<f64> {
    let sensor = v.sensor;
    let num = loss_at(v, u, t_ref)?;
    let den = loss_at(v, &FlowField::zeros(sensor.h, sensor.w), t_ref)?;
    if den <= 0.0 {
        return Err(Error::UndefinedMetric(
            "timestamp ratio with a zero baseline".to_string(),
        ));
    }
    Ok(num / den)
}

/// [`rsat_at`] at the volume-end reference time.
pub fn rsat(v: &EventVolume, u: &FlowField) -> Result<f64> {
    rsat_at(v, u, T_END)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{normalize_timestamps, slice_stream, Polarity, SensorSize};
    use crate::synth::{generate, Emission, Particle, SceneSpec};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt_from(flow: FlowField) -> GroundTruthFlow {
        let (_, h, w) = flow.data.dim();
        GroundTruthFlow {
            flow,
            valid: Array2::from_elem((h, w), true),
        }
    }

    #[test]
    fn aee_uniform_offset() {
        let pred = FlowField::uniform(4, 4, 1.0, 0.0);
        let gt = gt_from(FlowField::zeros(4, 4));
        let mask = EvalMask::full(4, 4);
        assert!((aee(&pred, &gt, &mask).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aee_exact_prediction_is_zero() {
        let pred = FlowField::uniform(4, 4, 2.0, -1.0);
        let gt = gt_from(FlowField::uniform(4, 4, 2.0, -1.0));
        let mask = EvalMask::full(4, 4);
        assert_eq!(aee(&pred, &gt, &mask).unwrap(), 0.0);
    }

    #[test]
    fn aee_three_four_five() {
        let pred = FlowField::uniform(1, 1, 3.0, 4.0);
        let gt = gt_from(FlowField::zeros(1, 1));
        let mask = EvalMask::full(1, 1);
        assert!((aee(&pred, &gt, &mask).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn aee_empty_mask_is_undefined() {
        let pred = FlowField::zeros(2, 2);
        let gt = gt_from(FlowField::zeros(2, 2));
        let mask = EvalMask {
            mask: Array2::from_elem((2, 2), false),
        };
        assert!(matches!(
            aee(&pred, &gt, &mask).unwrap_err(),
            Error::UndefinedMetric(_)
        ));
    }

    #[test]
    fn aee_translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Array3::from_shape_fn((2, 5, 5), |_| rng.gen_range(-2.0..2.0));
        let q = Array3::from_shape_fn((2, 5, 5), |_| rng.gen_range(-2.0..2.0));
        let mask = EvalMask::full(5, 5);
        let base = aee(
            &FlowField::from_array(p.clone()),
            &gt_from(FlowField::from_array(q.clone())),
            &mask,
        )
        .unwrap();
        let shifted = aee(
            &FlowField::from_array(p + 1.7),
            &gt_from(FlowField::from_array(q + 1.7)),
            &mask,
        )
        .unwrap();
        assert!((base - shifted).abs() < 1e-9);
    }

    #[test]
    fn outlier_joint_condition() {
        let mask = EvalMask::full(1, 1);
        // EE = 4 against |gt| = 10: outlier (4 > 3 and 4 > 0.5).
        let gt = gt_from(FlowField::uniform(1, 1, 10.0, 0.0));
        let pred = FlowField::uniform(1, 1, 6.0, 0.0);
        assert_eq!(outlier_rate(&pred, &gt, &mask).unwrap(), 100.0);
        // EE = 2.9 is never an outlier.
        let pred = FlowField::uniform(1, 1, 7.1, 0.0);
        assert_eq!(outlier_rate(&pred, &gt, &mask).unwrap(), 0.0);
        // EE = 4 against |gt| = 100: 4 > 3 but 4 < 5, not an outlier.
        let gt = gt_from(FlowField::uniform(1, 1, 100.0, 0.0));
        let pred = FlowField::uniform(1, 1, 96.0, 0.0);
        assert_eq!(outlier_rate(&pred, &gt, &mask).unwrap(), 0.0);
    }

    #[test]
    fn outlier_rate_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pred =
            FlowField::from_array(Array3::from_shape_fn((2, 6, 6), |_| rng.gen_range(-6.0..6.0)));
        let gt = gt_from(FlowField::zeros(6, 6));
        let mask = EvalMask::full(6, 6);
        let mut prev = 100.0;
        for th in [0.0, 1.0, 2.0, 3.0, 5.0, 8.0] {
            let r = outlier_rate_with_threshold(&pred, &gt, &mask, th).unwrap();
            assert!((0.0..=100.0).contains(&r));
            assert!(r <= prev + 1e-12);
            prev = r;
        }
    }

    fn test_scene(seed: u64) -> (crate::synth::GeneratedScene, SceneSpec) {
        // Edge-like segments sharing one translation.
        let mut particles = Vec::new();
        for s in 0..3 {
            for j in 0..6 {
                particles.push(Particle {
                    x0: 4.0 + 7.0 * s as f64,
                    y0: 8.0 + 3.0 * s as f64 + j as f64,
                    vx: 25.0,
                    vy: -12.0,
                    polarity: if (s + j) % 2 == 0 {
                        Polarity::Pos
                    } else {
                        Polarity::Neg
                    },
                });
            }
        }
        let spec = SceneSpec {
            sensor: SensorSize::new(32, 32),
            particles,
            duration: 0.3,
            event_rate: 500.0,
            contrast_threshold: 0.2,
            emission: Emission::Poisson,
            alternate_polarity: false,
            subpixel_positions: false,
            seed,
        };
        (generate(&spec).unwrap(), spec)
    }

    #[test]
    fn fwl_identity_is_exactly_one() {
        let (scene, spec) = test_scene(3);
        let vols = slice_stream(&scene.events, 0.1, spec.sensor).unwrap();
        let v = normalize_timestamps(&vols[0]).unwrap();
        let f = fwl(&v, &FlowField::zeros(32, 32)).unwrap();
        assert_eq!(f, 1.0);
    }

    #[test]
    fn fwl_gt_sharpens_and_beats_scrambled() {
        let (scene, spec) = test_scene(4);
        let vols = slice_stream(&scene.events, 0.1, spec.sensor).unwrap();
        let v = normalize_timestamps(&vols[1]).unwrap();
        let gt = FlowField::uniform(32, 32, 2.5, -1.2);
        let f_gt = fwl(&v, &gt).unwrap();
        assert!(f_gt > 1.0, "fwl at gt {f_gt}");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scrambled = FlowField::from_array(Array3::from_shape_fn((2, 32, 32), |_| {
            rng.gen_range(-3.0..3.0)
        }));
        let f_s = fwl(&v, &scrambled).unwrap();
        assert!(f_s < f_gt, "scrambled {f_s} vs gt {f_gt}");
    }

    #[test]
    fn fwl_empty_volume_is_undefined() {
        let v = crate::event::EventVolume::new(vec![], 0.0, 1.0, SensorSize::new(4, 4)).unwrap();
        let v = normalize_timestamps(&v).unwrap();
        assert!(matches!(
            fwl(&v, &FlowField::zeros(4, 4)).unwrap_err(),
            Error::UndefinedMetric(_)
        ));
    }

    #[test]
    fn rsat_identity_one_and_gt_below_one() {
        let (scene, spec) = test_scene(5);
        let vols = slice_stream(&scene.events, 0.1, spec.sensor).unwrap();
        let v = normalize_timestamps(&vols[1]).unwrap();
        assert_eq!(rsat(&v, &FlowField::zeros(32, 32)).unwrap(), 1.0);
        let gt = FlowField::uniform(32, 32, 2.5, -1.2);
        let r_gt = rsat(&v, &gt).unwrap();
        assert!(r_gt < 1.0, "rsat at gt {r_gt}");
        let r_half = rsat(&v, &FlowField::uniform(32, 32, 1.25, -0.6)).unwrap();
        assert!(r_gt < r_half, "gt {r_gt} vs half-gt {r_half}");
    }

    #[test]
    fn mask_requires_events_and_valid_gt() {
        let (scene, spec) = test_scene(6);
        let vols = slice_stream(&scene.events, 0.1, spec.sensor).unwrap();
        let gt = scene.ground_truth(vols[0].t_start, 0.1);
        let mask = EvalMask::new(&gt, &vols[0]);
        assert!(mask.count() > 0);
        for y in 0..32 {
            for x in 0..32 {
                if mask.mask[[y, x]] {
                    assert!(gt.valid[[y, x]]);
                }
            }
        }
        // Fewer masked pixels than events' pixels union GT: mask is subset
        // of the GT validity region.
        let gt_count = gt.valid.iter().filter(|&&m| m).count();
        assert!(mask.count() <= gt_count);
    }
}
