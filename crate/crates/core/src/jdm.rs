//! Joint diffusion of an image and its occupancy mask: the two planes are
//! concatenated channel-wise, trained and sampled with the ordinary
//! machinery, and only the image plane is counted.

use serde::{Deserialize, Serialize};

use crate::counting::{CountVerdict, Counter};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::metrics::{failure_rates, FailureRates};
use crate::pipeline::{evaluate_samples, Resolution};
use crate::sampler::{sample, SamplerConfig};
use crate::score::{Architecture, ScoreModel, Skip, TinyNet, TrainConfig, TrainReport};
use crate::tensor::Tensor;
use crate::toyshape::{CountProfile, GrayDataset, RasterImage};

/// Image plane followed by mask plane, both in model space ([−1, 1]).
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub height: usize,
    pub width: usize,
    pub tensor: Tensor,
}

impl JointSample {
    pub const CHANNELS: usize = 2;
}

pub fn make_joint(image: &RasterImage, mask: &RasterImage) -> Result<JointSample> {
    if (image.height, image.width) != (mask.height, mask.width) {
        return Err(Error::ShapeMismatch { expected: vec![image.height, image.width], got: vec![mask.height, mask.width] });
    }
    let mut data = image.to_model_values();
    data.extend(mask.to_model_values());
    Ok(JointSample { height: image.height, width: image.width, tensor: Tensor::from_vec(data) })
}

/// Inverse of [`make_joint`]: (image, mask).
pub fn split(joint: &JointSample) -> Result<(RasterImage, RasterImage)> {
    let plane = joint.height * joint.width;
    let d = joint.tensor.data();
    if d.len() != JointSample::CHANNELS * plane {
        return Err(Error::DimensionMismatch { expected: JointSample::CHANNELS * plane, got: d.len() });
    }
    Ok((
        RasterImage::from_model_values(joint.height, joint.width, &d[..plane])?,
        RasterImage::from_model_values(joint.height, joint.width, &d[plane..])?,
    ))
}

/// Pools image and mask to model resolution; the pooled mask is
/// re-binarized at ½ so the mask plane stays binary.
pub fn joint_training_set(data: &GrayDataset, resolution: &Resolution) -> Result<Vec<JointSample>> {
    resolution.validate()?;
    let side = resolution.model_side();
    data.images
        .iter()
        .zip(&data.masks)
        .map(|(img, mask)| {
            let small = |im: &RasterImage| RasterImage::from_model_values(side, side, &resolution.encode(im)?);
            let m = small(mask)?;
            let m = RasterImage::new(side, side, m.pixels.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect())?;
            make_joint(&small(img)?, &m)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JdmConfig {
    pub hidden: Vec<usize>,
    /// Width of the per-element branch (0 disables it).
    pub pointwise: usize,
    pub time_dim: usize,
    pub init_seed: u64,
}

/// Trains a two-channel network on joint samples; the loss weights both
/// planes equally. The skip statistics are pooled over both planes, matching
/// the single-channel baseline's construction.
pub fn train_jdm(
    dataset: &[JointSample],
    schedule: &NoiseSchedule,
    net_config: &JdmConfig,
    train_config: &TrainConfig,
) -> Result<(TinyNet, TrainReport)> {
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    let plane = first.height * first.width;
    let items: Vec<Tensor> = dataset.iter().map(|j| j.tensor.clone()).collect();
    let arch = Architecture {
        channels: JointSample::CHANNELS,
        skip: Some(Skip::from_data(&items)?),
        pointwise: net_config.pointwise,
        time_dim: net_config.time_dim,
        ..Architecture::mlp(JointSample::CHANNELS * plane, net_config.hidden.clone())
    };
    let net = TinyNet::init(arch, net_config.init_seed)?;
    net.train(&items, schedule, train_config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JdmEvaluation {
    pub rates: FailureRates,
    pub verdicts: Vec<CountVerdict>,
    pub samples: Tensor,
}

/// Samples joint tensors and judges the image plane only, with the gray
/// counter. `dataset` is only used for diffused initial noise.
pub fn sample_and_evaluate_jdm(
    model: &dyn ScoreModel,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    profile: &CountProfile,
    resolution: &Resolution,
    dataset: &[JointSample],
) -> Result<JdmEvaluation> {
    if model.dim() != JointSample::CHANNELS * resolution.model_pixels() {
        return Err(Error::DimensionMismatch { expected: JointSample::CHANNELS * resolution.model_pixels(), got: model.dim() });
    }
    let items: Vec<Tensor> = dataset.iter().map(|j| j.tensor.clone()).collect();
    let out = sample(model, config, schedule, &items)?;
    let verdicts = evaluate_samples(&out.samples, JointSample::CHANNELS, resolution, &Counter::gray(), profile)?;
    Ok(JdmEvaluation { rates: failure_rates(&verdicts)?, verdicts, samples: out.samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{InitNoise, SolverKind};
    use crate::score::TinyNet;
    use crate::toyshape::generate_gray_dataset;

    #[test]
    fn joint_round_trip_is_bitwise() {
        let g = generate_gray_dataset(4, &CountProfile::paper(), 2, 64).unwrap();
        for (img, mask) in g.images.iter().zip(&g.masks) {
            let j = make_joint(img, mask).unwrap();
            assert_eq!(j.tensor.len(), 2 * 64 * 64);
            let (a, b) = split(&j).unwrap();
            assert_eq!((&a, &b), (img, mask));
            assert!(img.pixels.iter().zip(&mask.pixels).any(|(p, q)| p != q));
        }
        let empty = make_joint(&RasterImage::zeros(8, 8), &RasterImage::zeros(8, 8)).unwrap();
        assert!(empty.tensor.data().iter().all(|&v| v == -1.0));
        assert!(make_joint(&RasterImage::zeros(8, 8), &RasterImage::zeros(4, 8)).is_err());
    }

    #[test]
    fn training_set_mask_is_binary() {
        let g = generate_gray_dataset(6, &CountProfile::paper(), 1, 64).unwrap();
        let js = joint_training_set(&g, &Resolution::default()).unwrap();
        for j in &js {
            let (_, m) = split(j).unwrap();
            assert!(m.pixels.iter().all(|&p| p == 0.0 || p == 1.0));
            assert_eq!((j.height, j.width), (32, 32));
        }
    }

    #[test]
    fn zero_training_steps_keep_initial_parameters() {
        let g = generate_gray_dataset(4, &CountProfile::paper(), 1, 64).unwrap();
        let js = joint_training_set(&g, &Resolution::default()).unwrap();
        let cfg = JdmConfig { hidden: vec![8], pointwise: 4, time_dim: 16, init_seed: 4 };
        let train = TrainConfig { steps: 0, validation_size: 4, ..TrainConfig::default() };
        let (net, _) = train_jdm(&js, &NoiseSchedule::linear_default(), &cfg, &train).unwrap();
        let fresh = TinyNet::init(net.architecture().clone(), 4).unwrap();
        assert_eq!(net, fresh);
        assert_eq!(net.architecture().channels, 2);
        assert!(net.architecture().skip.is_some());
    }

    #[test]
    fn joint_gradient_check() {
        let arch = Architecture { channels: 2, time_dim: 4, pointwise: 3, skip: Some(Skip { mean: -0.5, std: 0.6 }), ..Architecture::mlp(6, vec![5]) };
        let net = TinyNet::init(arch, 3).unwrap();
        let mut rng = crate::rng::rng_from_seed(8);
        let x = Tensor::randn(&[3, 6], &mut rng);
        let target = Tensor::randn(&[3, 6], &mut rng);
        let times = [20.0, 400.0, 900.0];
        let params: Vec<f64> = net.params().iter().map(|&v| v as f64 + 0.03).collect();
        let (_, grad) = net.objective_f64(Some(&params), &x, &times, &target, &NoiseSchedule::linear_default()).unwrap();
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += 1e-6;
            let lp = net.objective_f64(Some(&p), &x, &times, &target, &NoiseSchedule::linear_default()).unwrap().0;
            p[i] -= 2e-6;
            let lm = net.objective_f64(Some(&p), &x, &times, &target, &NoiseSchedule::linear_default()).unwrap().0;
            let fd = (lp - lm) / 2e-6;
            assert!((grad[i] - fd).abs() / fd.abs().max(grad[i].abs()).max(1e-6) < 1e-4, "param {i}");
        }
    }

    #[test]
    fn held_out_joint_loss_decreases() {
        let res = Resolution { image_size: 64, factor: 8 };
        let schedule = NoiseSchedule::linear_default();
        let train = joint_training_set(&generate_gray_dataset(200, &CountProfile::paper(), 1, 64).unwrap(), &res).unwrap();
        let held = joint_training_set(&generate_gray_dataset(64, &CountProfile::paper(), 2, 64).unwrap(), &res).unwrap();
        let mut rng = crate::rng::rng_from_seed(4);
        let (mut xs, mut eps, mut times) = (Vec::new(), Vec::new(), Vec::new());
        for (k, j) in held.iter().enumerate() {
            let t = 1 + (k * 997) % 1000;
            let e = Tensor::randn(&[128], &mut rng);
            xs.push(crate::diffusion::diffuse(&j.tensor, t, &e, &schedule).unwrap());
            eps.push(e);
            times.push(t as f64);
        }
        let (x, e) = (Tensor::stack_rows(&xs).unwrap(), Tensor::stack_rows(&eps).unwrap());
        let cfg = JdmConfig { hidden: vec![64], pointwise: 8, time_dim: 16, init_seed: 2 };
        let tc = TrainConfig { steps: 400, lr: 1e-3, validation_size: 32, ..TrainConfig::default() };
        let (before, _) = train_jdm(&train, &schedule, &cfg, &TrainConfig { steps: 0, ..tc.clone() }).unwrap();
        let (after, _) = train_jdm(&train, &schedule, &cfg, &tc).unwrap();
        let l0 = before.objective_f64(None, &x, &times, &e, &schedule).unwrap().0;
        let l1 = after.objective_f64(None, &x, &times, &e, &schedule).unwrap().0;
        assert!(l1 < 0.95 * l0, "{l0} -> {l1}");
    }

    #[test]
    fn evaluation_ignores_the_mask_plane() {
        let res = Resolution::default();
        let g = generate_gray_dataset(8, &CountProfile::paper(), 5, 64).unwrap();
        let js = joint_training_set(&g, &res).unwrap();
        let rows: Vec<Tensor> = js.iter().map(|j| j.tensor.clone()).collect();
        let mut batch = Tensor::stack_rows(&rows).unwrap();
        let before = evaluate_samples(&batch, 2, &res, &Counter::gray(), &CountProfile::paper()).unwrap();
        let plane = res.model_pixels();
        for (k, v) in batch.data_mut().iter_mut().enumerate() {
            if k % (2 * plane) >= plane {
                *v = if k % 3 == 0 { 1.0 } else { -0.3 };
            }
        }
        let after = evaluate_samples(&batch, 2, &res, &Counter::gray(), &CountProfile::paper()).unwrap();
        assert_eq!(before, after);
        let correct = before.iter().zip(&g.scenes).filter(|(v, s)| v.counts == s.counts()).count();
        assert!(correct >= 7, "{correct}/8");
    }

    #[test]
    fn sampling_a_joint_model_end_to_end() {
        let res = Resolution::default();
        let net = TinyNet::init(Architecture { channels: 2, ..Architecture::mlp(2 * 1024, vec![16]) }, 1).unwrap();
        let cfg = SamplerConfig::new(SolverKind::Solver1, 5, InitNoise::Normal, 3).with_samples(4);
        let ev = sample_and_evaluate_jdm(&net, &cfg, &NoiseSchedule::linear_default(), &CountProfile::paper(), &res, &[]).unwrap();
        assert_eq!(ev.rates.n, 4);
        assert_eq!(ev.samples.row_len(), 2048);
        let single = TinyNet::init(Architecture::mlp(1024, vec![4]), 1).unwrap();
        assert!(sample_and_evaluate_jdm(&single, &cfg, &NoiseSchedule::linear_default(), &CountProfile::paper(), &res, &[]).is_err());
    }
}
