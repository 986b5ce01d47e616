//! The calibrate → distill → infer pipeline behind the command-line tool.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{bound_report, collect_stats, initialize_all_bounds, minmax_bounds, BoundRecord, DobiConfig};
use crate::distill::{dqc_train, DistillConfig, DistillOutcome};
use crate::error::{Error, Result};
use crate::io::{random_crops, QuantizedModelArtifact};
use crate::metrics::ImageU8;
use crate::model::{run, Mode, ModelWeights};
use crate::tensor::Tensor;

/// How the first-stage bounds are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    Dobi,
    Minmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferMode {
    Fp,
    FakeQuant,
    PackedInt,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bits: u8,
    pub method: InitMethod,
    pub num_patches: usize,
    pub sites: Vec<BoundRecord>,
}

/// Seeded calibration patches: `count` crops of `patch` pixels.
pub fn sample_patches(images: &[ImageU8], count: usize, patch: usize, seed: u64) -> Result<Vec<Tensor>> {
    random_crops(images, count, patch, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Collects statistics over `patches` and picks initial bounds.
pub fn calibrate(
    weights: &ModelWeights,
    patches: &[Tensor],
    bits: u8,
    method: InitMethod,
    config: &DobiConfig,
) -> Result<(QuantizedModelArtifact, CalibrationReport)> {
    config.validate()?;
    let stats = collect_stats(weights, patches, config.histogram_bins)?;
    let (quantizers, mse) = match method {
        InitMethod::Dobi => {
            let c = initialize_all_bounds(weights, patches, &stats, bits, config)?;
            (c.quantizers, Some(c.mse))
        }
        InitMethod::Minmax => (minmax_bounds(weights, &stats, bits, config.symmetry_threshold)?, None),
    };
    let report = CalibrationReport {
        bits,
        method,
        num_patches: patches.len(),
        sites: bound_report(&quantizers, Some(&stats), mse.as_deref()),
    };
    Ok((QuantizedModelArtifact::from_float(weights, quantizers, Some(stats))?, report))
}

/// Refines the bounds of an unpacked artifact. With `from_minmax` the
/// stored statistics supply MinMax starting bounds instead.
pub fn distill(
    artifact: &QuantizedModelArtifact,
    train: &[Tensor],
    val: &[Tensor],
    config: &DistillConfig,
    from_minmax: Option<f64>,
) -> Result<(QuantizedModelArtifact, DistillOutcome)> {
    if artifact.is_packed() {
        return Err(Error::InvalidArgument("distillation needs an artifact with FP weights".into()));
    }
    let weights = artifact.weights()?;
    let init = match from_minmax {
        None => artifact.quantizers.clone(),
        Some(threshold) => {
            let stats = artifact
                .stats
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("artifact has no statistics to derive MinMax bounds".into()))?;
            minmax_bounds(&weights, stats, artifact.bits, threshold)?
        }
    };
    let outcome = dqc_train(&weights, &init, train, val, config)?;
    let refined = QuantizedModelArtifact::from_float(&weights, outcome.quantizers.clone(), artifact.stats.clone())?;
    Ok((refined, outcome))
}

pub fn infer_image(artifact: &QuantizedModelArtifact, image: &ImageU8, mode: InferMode) -> Result<ImageU8> {
    let weights = artifact.weights()?;
    let x = image.to_tensor();
    let y = match mode {
        InferMode::Fp => run(&weights, &x, Mode::Fp, None)?.0,
        InferMode::FakeQuant => run(&weights, &x, Mode::FakeQuant(&artifact.quantizers), None)?.0,
        InferMode::PackedInt => {
            let packed = artifact.packed_model()?;
            run(&weights, &x, Mode::PackedInt(&packed), None)?.0
        }
    };
    ImageU8::from_tensor(&y)
}

/// Quick internal consistency checks on a random toy model.
pub fn selftest(seed: u64) -> Result<Vec<(String, bool)>> {
    use crate::complexity::{count_params, compression_ratio};
    use crate::io::{decode_checkpoint, encode_checkpoint};
    use crate::metrics::psnr_plane;
    use crate::model::{ModelConfig, PackedModel};
    use crate::quant::{QuantGrid, SUPPORTED_BITS};
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let mut quant_ok = true;
    for _ in 0..10_000 {
        let bits = SUPPORTED_BITS[rng.random_range(0..SUPPORTED_BITS.len())];
        let l: f32 = rng.random_range(-4.0..0.0);
        let u = l + rng.random_range(0.01..8.0f32);
        let g = QuantGrid::new(l, u, bits)?;
        let (a, b) = (rng.random_range(-10.0..10.0f32), rng.random_range(-10.0..10.0f32));
        let (qa, qb) = (g.quantize(a), g.quantize(b));
        quant_ok &= g.quantize(qa) == qa && (l..=u).contains(&qa);
        quant_ok &= a > b || qa <= qb;
        let k = rng.random_range(0..=g.levels());
        quant_ok &= g.quantize(g.level(k)) == g.level(k);
    }
    checks.push(("fake quantization invariants".to_string(), quant_ok));

    let weights = ModelWeights::random(&ModelConfig::toy(2), seed)?;
    let patches: Vec<Tensor> = (0..2)
        .map(|_| Tensor::from_fn(&[3, 12, 12], |_| rng.random::<f32>()))
        .collect();
    let (artifact, _) = calibrate(&weights, &patches, 4, InitMethod::Minmax, &DobiConfig::default())?;
    let x = &patches[0];
    let fake = run(&weights, x, Mode::FakeQuant(&artifact.quantizers), None)?.0;
    let packed = PackedModel::new(&weights, &artifact.quantizers)?;
    let int = run(&weights, x, Mode::PackedInt(&packed), None)?.0;
    checks.push(("packed-int matches fake-quant".into(), int.max_abs_diff(&fake)? <= 1e-3));

    let ckpt = encode_checkpoint(&weights);
    checks.push(("checkpoint round trip".into(), encode_checkpoint(&decode_checkpoint(&ckpt)?) == ckpt));
    let bytes = artifact.pack()?.to_bytes();
    checks.push((
        "artifact round trip".into(),
        QuantizedModelArtifact::from_bytes(&bytes)?.to_bytes() == bytes,
    ));

    let p = psnr_plane(&[1.0; 16], &[2.0; 16], 4, 4, 0)?;
    checks.push(("PSNR closed form".into(), (p - 48.1308).abs() < 1e-3));

    let ratio = compression_ratio(&count_params(&ModelConfig::light(4))?, 4)?;
    checks.push(("light 4-bit compression ratio".into(), (ratio / 3.07 - 1.0).abs() <= 0.02));
    Ok(checks)
}
