//! Model checkpoints: parameters plus the hyperparameters needed to rebuild
//! the architecture, stored as `config.*` tensors alongside the weights.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqdiff_core::denoiser::{DenoiserConfig, DenoiserModel};
use vqdiff_core::diffusion::NoiseSchedule;
use vqdiff_core::eval::{ClassifierConfig, StyleClassifier};
use vqdiff_core::numerics::Tensor;
use vqdiff_core::vqvae::{VqVae, VqVaeConfig};

use crate::checkpoint::{self, take_named};
use crate::error::{Error, Result};

fn config_tensor(values: &[f64]) -> Tensor {
    Tensor::from_vec(values.to_vec())
}

fn read_config<const N: usize>(
    tensors: &mut Vec<(String, Tensor)>,
    name: &str,
    path: &Path,
) -> Result<[f64; N]> {
    let t = take_named(tensors, name, path)?;
    t.data()
        .try_into()
        .map_err(|_| Error::format(path, format!("{name} must hold {N} values, found {}", t.numel())))
}

fn as_count(v: f64, what: &str, path: &Path) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e12 {
        Ok(v as usize)
    } else {
        Err(Error::format(path, format!("{what} = {v} is not a count")))
    }
}

fn core_format(path: &Path) -> impl Fn(vqdiff_core::Error) -> Error + '_ {
    move |e| Error::format(path, e.to_string())
}

// Parameters are overwritten on load, so the init seed is irrelevant.
fn scratch_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

pub fn save_vqvae(path: &Path, model: &VqVae) -> Result<()> {
    let c = model.config();
    let mut tensors = vec![(
        "config.vqvae".to_string(),
        config_tensor(&[
            c.codebook_size as f64,
            c.code_dim as f64,
            c.downsample as f64,
            c.hidden as f64,
            c.kernel as f64,
            c.beta,
        ]),
    )];
    tensors.extend(model.params().iter().map(|(n, t)| (n.to_string(), t.clone())));
    checkpoint::save(path, &tensors)
}

pub fn load_vqvae(path: &Path) -> Result<VqVae> {
    let mut tensors = checkpoint::load(path)?;
    let [k, d, down, hidden, kernel, beta] = read_config::<6>(&mut tensors, "config.vqvae", path)?;
    let config = VqVaeConfig {
        codebook_size: as_count(k, "codebook_size", path)?,
        code_dim: as_count(d, "code_dim", path)?,
        downsample: as_count(down, "downsample", path)?,
        hidden: as_count(hidden, "hidden", path)?,
        kernel: as_count(kernel, "kernel", path)?,
        beta,
    };
    let mut model = VqVae::new(config, &mut scratch_rng()).map_err(core_format(path))?;
    model.params_mut().load(tensors).map_err(core_format(path))?;
    Ok(model)
}

/// The denoiser together with the noise schedule it was trained under.
pub fn save_denoiser(path: &Path, model: &DenoiserModel, schedule: &NoiseSchedule) -> Result<()> {
    let c = model.config();
    let steps = schedule.steps();
    let mut tensors = vec![
        (
            "config.denoiser".to_string(),
            config_tensor(&[
                c.classes as f64,
                c.seq_len as f64,
                c.styles as f64,
                c.steps as f64,
                c.d_model as f64,
                c.blocks as f64,
                c.heads as f64,
                c.ffn_mult as f64,
            ]),
        ),
        (
            "schedule.alpha_bar".to_string(),
            Tensor::from_vec((0..=steps).map(|t| schedule.alpha_bar(t)).collect()),
        ),
        (
            "schedule.gamma_bar".to_string(),
            Tensor::from_vec((0..=steps).map(|t| schedule.gamma_bar(t)).collect()),
        ),
    ];
    tensors.extend(model.params().iter().map(|(n, t)| (n.to_string(), t.clone())));
    checkpoint::save(path, &tensors)
}

pub fn load_denoiser(path: &Path) -> Result<(DenoiserModel, NoiseSchedule)> {
    let mut tensors = checkpoint::load(path)?;
    let v = read_config::<8>(&mut tensors, "config.denoiser", path)?;
    let n = |i: usize, what: &str| as_count(v[i], what, path);
    let config = DenoiserConfig {
        classes: n(0, "classes")?,
        seq_len: n(1, "seq_len")?,
        styles: n(2, "styles")?,
        steps: n(3, "steps")?,
        d_model: n(4, "d_model")?,
        blocks: n(5, "blocks")?,
        heads: n(6, "heads")?,
        ffn_mult: n(7, "ffn_mult")?,
    };
    let alpha_bar = take_named(&mut tensors, "schedule.alpha_bar", path)?.into_data();
    let gamma_bar = take_named(&mut tensors, "schedule.gamma_bar", path)?.into_data();
    let schedule = NoiseSchedule::from_cumulative(config.classes, alpha_bar, gamma_bar).map_err(core_format(path))?;
    if schedule.steps() != config.steps {
        return Err(Error::format(
            path,
            format!("schedule has {} steps, denoiser expects {}", schedule.steps(), config.steps),
        ));
    }
    let mut model = DenoiserModel::new(config, &mut scratch_rng()).map_err(core_format(path))?;
    model.params_mut().load(tensors).map_err(core_format(path))?;
    Ok((model, schedule))
}

pub fn save_classifier(path: &Path, model: &StyleClassifier) -> Result<()> {
    let c = model.config();
    let mut tensors = vec![(
        "config.classifier".to_string(),
        config_tensor(&[
            c.classes as f64,
            c.channels as f64,
            c.layers as f64,
            c.kernel as f64,
            c.pool as f64,
            c.momentum,
        ]),
    )];
    tensors.extend(model.named_tensors());
    checkpoint::save(path, &tensors)
}

pub fn load_classifier(path: &Path) -> Result<StyleClassifier> {
    let mut tensors = checkpoint::load(path)?;
    let [classes, channels, layers, kernel, pool, momentum] = read_config::<6>(&mut tensors, "config.classifier", path)?;
    let config = ClassifierConfig {
        classes: as_count(classes, "classes", path)?,
        channels: as_count(channels, "channels", path)?,
        layers: as_count(layers, "layers", path)?,
        kernel: as_count(kernel, "kernel", path)?,
        pool: as_count(pool, "pool", path)?,
        momentum,
    };
    let mut model = StyleClassifier::new(config, &mut scratch_rng()).map_err(core_format(path))?;
    model.load_named(tensors).map_err(core_format(path))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn models_round_trip_through_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);

        let vq = VqVae::new(VqVaeConfig { codebook_size: 8, ..VqVaeConfig::default() }, &mut rng).unwrap();
        let p = dir.path().join("vq.ckpt");
        save_vqvae(&p, &vq).unwrap();
        assert_eq!(load_vqvae(&p).unwrap(), vq);

        let schedule = NoiseSchedule::linear(5, 8, 0.9, 0.01).unwrap();
        let den = DenoiserModel::new(DenoiserConfig::desk(8, 6, 2, 5), &mut rng).unwrap();
        let p = dir.path().join("den.ckpt");
        save_denoiser(&p, &den, &schedule).unwrap();
        let (back, sched) = load_denoiser(&p).unwrap();
        assert_eq!(back, den);
        assert_eq!(sched, schedule);

        let clf = StyleClassifier::new(ClassifierConfig::new(3), &mut rng).unwrap();
        let p = dir.path().join("clf.ckpt");
        save_classifier(&p, &clf).unwrap();
        assert_eq!(load_classifier(&p).unwrap(), clf);

        // A VQ-VAE checkpoint is not a denoiser.
        let err = load_denoiser(&dir.path().join("vq.ckpt")).unwrap_err();
        assert!(err.to_string().contains("config.denoiser"), "{err}");
    }
}
