//! Segmentation networks.
//!
//! Both architectures map an RGB batch `(B, S, S, 3)` to per-pixel class
//! probabilities `(B, S, S, C)` and are fully convolutional, so any input
//! whose side is divisible by the total down-sampling factor is accepted.

mod eunet;
mod unet;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{checkpoint, loss, Adam, Graph, ParamStore, Tensor, Var};

pub use eunet::{EfficientEncoderConfig, EuNet, StageSpec};
pub use unet::UNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Unet,
    Eunet,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Unet => "unet",
            Arch::Eunet => "eunet",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Arch::Unet),
            "eunet" => Ok(Arch::Eunet),
            other => Err(Error::config(
                "arch",
                format!("must be `unet` or `eunet`, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegModelConfig {
    pub arch: Arch,
    pub num_classes: usize,
    pub input_size: usize,
    /// U-Net: channels of the first level. EU-Net: channels of the last
    /// decoder module (earlier modules double it).
    pub base_width: usize,
    pub depth_stages: usize,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub resolution_mult: f64,
    pub final_activation: FinalActivation,
    #[serde(default)]
    pub init_seed: u64,
}

impl SegModelConfig {
    /// Desk-scale U-Net: base width 16, four levels, 256 px input.
    pub fn unet_desk() -> Self {
        SegModelConfig {
            arch: Arch::Unet,
            num_classes: 3,
            input_size: 256,
            base_width: 16,
            depth_stages: 4,
            width_mult: 1.0,
            depth_mult: 1.0,
            resolution_mult: 1.0,
            final_activation: FinalActivation::Softmax,
            init_seed: 0,
        }
    }

    /// Desk-scale EU-Net: the unscaled B0 encoder at 256 px input.
    pub fn eunet_desk() -> Self {
        SegModelConfig {
            arch: Arch::Eunet,
            num_classes: 3,
            input_size: 256,
            base_width: 16,
            depth_stages: 5,
            width_mult: 1.0,
            depth_mult: 1.0,
            resolution_mult: 1.0,
            final_activation: FinalActivation::Softmax,
            init_seed: 0,
        }
    }

    /// Compound-scaled EU-Net preset: width `1.1^phi`, depth `1.2^phi`,
    /// resolution `1.15^phi` of a 224 px B0 baseline. `phi = 6` approximates
    /// the B7 proportions (width 2.0, depth 3.1, 600 px), far beyond desk scale.
    pub fn eunet_compound(phi: u32) -> Self {
        let width = 1.1f64.powi(phi as i32);
        let depth = 1.2f64.powi(phi as i32);
        let res = 1.15f64.powi(phi as i32);
        let input = ((224.0 * res / 32.0).round() as usize).max(1) * 32;
        SegModelConfig {
            input_size: input,
            width_mult: width,
            depth_mult: depth,
            resolution_mult: res,
            ..Self::eunet_desk()
        }
    }

    /// Channels produced by the network head before the final activation.
    pub fn head_channels(&self) -> usize {
        match self.final_activation {
            FinalActivation::Sigmoid => 1,
            FinalActivation::Softmax => self.num_classes,
        }
    }

    /// Total spatial reduction of the encoder.
    pub fn stride(&self) -> usize {
        1 << self.depth_stages
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.final_activation == FinalActivation::Sigmoid && self.num_classes != 2 {
            return Err(Error::config(
                "final_activation",
                "sigmoid is only valid for the binary single-map head (num_classes = 2)",
            ));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width", "must be positive"));
        }
        if self.depth_stages == 0 || self.depth_stages > 8 {
            return Err(Error::config("depth_stages", "must lie in 1..=8"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.stride()) {
            return Err(Error::config(
                "input_size",
                format!("must be a positive multiple of 2^depth_stages = {}", self.stride()),
            ));
        }
        for (name, v) in [
            ("width_mult", self.width_mult),
            ("depth_mult", self.depth_mult),
            ("resolution_mult", self.resolution_mult),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be a positive finite number"));
            }
        }
        if self.arch == Arch::Eunet && self.depth_stages != 5 {
            return Err(Error::config("depth_stages", "EU-Net requires exactly 5 stages"));
        }
        Ok(())
    }
}

enum Net {
    Unet(UNet),
    Eunet(EuNet),
}

/// A built segmentation network together with its parameters.
pub struct SegModel {
    cfg: SegModelConfig,
    store: ParamStore,
    net: Net,
}

pub const CHECKPOINT_KIND: &str = "segmentation";

/// Builds a plain U-Net.
pub fn build_unet(cfg: &SegModelConfig) -> Result<SegModel> {
    cfg.validate()?;
    if cfg.arch != Arch::Unet {
        return Err(Error::config("arch", "build_unet requires arch = unet"));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let net = UNet::new(cfg, &mut store, &mut rng);
    Ok(SegModel {
        cfg: cfg.clone(),
        store,
        net: Net::Unet(net),
    })
}

/// Builds the EU-Net (compound-scaled inverted-bottleneck encoder, five
/// up-convolution decoder modules).
pub fn build_eunet(cfg: &SegModelConfig) -> Result<SegModel> {
    cfg.validate()?;
    if cfg.arch != Arch::Eunet {
        return Err(Error::config("arch", "build_eunet requires arch = eunet"));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let net = EuNet::new(cfg, &mut store, &mut rng);
    Ok(SegModel {
        cfg: cfg.clone(),
        store,
        net: Net::Eunet(net),
    })
}

/// Converts 8-bit RGB pixels to the network input range `[-1, 1]`.
pub fn normalize_rgb(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&p| p as f32 / 127.5 - 1.0).collect()
}

impl SegModel {
    pub fn build(cfg: &SegModelConfig) -> Result<Self> {
        match cfg.arch {
            Arch::Unet => build_unet(cfg),
            Arch::Eunet => build_eunet(cfg),
        }
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Records the network on `g` and returns the pre-activation head output.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Var {
        match &self.net {
            Net::Unet(n) => n.forward(g, x),
            Net::Eunet(n) => n.forward(g, x),
        }
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[3] != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Shape(format!("expected an RGB batch (B, H, W, 3), got {s:?}")));
        }
        if !s[1].is_multiple_of(self.cfg.stride()) || !s[2].is_multiple_of(self.cfg.stride()) {
            return Err(Error::Shape(format!(
                "spatial dims {}x{} must be multiples of {}",
                s[1],
                s[2],
                self.cfg.stride()
            )));
        }
        Ok(())
    }

    /// Inference-mode class probabilities `(B, H, W, num_classes)`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let s = batch.shape();
        if s[1] != self.cfg.input_size || s[2] != self.cfg.input_size {
            return Err(Error::Shape(format!(
                "batch is {}x{}, model input size is {}",
                s[1], s[2], self.cfg.input_size
            )));
        }
        self.forward_any_size(batch)
    }

    /// As [`SegModel::forward`] for any stride-aligned spatial size.
    pub fn forward_any_size(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut g = Graph::new(&self.store, false);
        let x = g.input(batch.clone());
        let z = self.logits(&mut g, x);
        Ok(self.activate(g.value(z)))
    }

    /// Applies the final activation to head outputs.
    pub fn activate(&self, logits: &Tensor) -> Tensor {
        match self.cfg.final_activation {
            FinalActivation::Softmax => loss::softmax(logits),
            FinalActivation::Sigmoid => {
                let (n, h, w, _) = logits.dims4();
                let mut out = Vec::with_capacity(n * h * w * 2);
                for &z in logits.data() {
                    let p = loss::sigmoid(z);
                    out.push(1.0 - p);
                    out.push(p);
                }
                Tensor::from_vec(&[n, h, w, 2], out).unwrap()
            }
        }
    }

    pub fn save(&self, path: &Path, adam: Option<&Adam>) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, &self.cfg, &self.store, adam)
    }

    /// Loads a checkpoint; when `expected` is given the stored config must match it.
    pub fn load(path: &Path, expected: Option<&SegModelConfig>) -> Result<(Self, Option<Adam>)> {
        let (_, cfg_json) = checkpoint::read_config(path)?;
        let cfg: SegModelConfig =
            serde_json::from_value(cfg_json).map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        if let Some(exp) = expected {
            if exp != &cfg {
                return Err(Error::Checkpoint(format!(
                    "checkpoint config {cfg:?} is incompatible with requested {exp:?}"
                )));
            }
        }
        let mut model = SegModel::build(&cfg)?;
        let ck = checkpoint::load_into(path, CHECKPOINT_KIND, &mut model.store)?;
        model.store = ck.store;
        Ok((model, ck.adam))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(n: usize, s: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[n, s, s, 3],
            (0..n * s * s * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn conv(k: usize, cin: usize, cout: usize) -> usize {
        k * k * cin * cout + cout
    }

    #[test]
    fn unet_shape_and_normalisation() {
        let cfg = SegModelConfig {
            base_width: 8,
            depth_stages: 3,
            input_size: 64,
            ..SegModelConfig::unet_desk()
        };
        let m = build_unet(&cfg).unwrap();
        let y = m.forward(&random_batch(2, 64, 1)).unwrap();
        assert_eq!(y.shape(), &[2, 64, 64, 3]);
        for px in y.data().chunks_exact(3) {
            assert!((px.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn unet_parameter_count_matches_layer_tally() {
        let cfg = SegModelConfig {
            base_width: 8,
            depth_stages: 3,
            input_size: 64,
            ..SegModelConfig::unet_desk()
        };
        let m = build_unet(&cfg).unwrap();
        // contracting path
        let mut tally = conv(3, 3, 8) + conv(3, 8, 8);
        tally += conv(3, 8, 16) + conv(3, 16, 16);
        tally += conv(3, 16, 32) + conv(3, 32, 32);
        // bottleneck
        tally += conv(3, 32, 64) + conv(3, 64, 64);
        // expansive path: 2x2 up-conv, then two 3x3 convs on the concatenation
        tally += conv(2, 64, 32) + conv(3, 64, 32) + conv(3, 32, 32);
        tally += conv(2, 32, 16) + conv(3, 32, 16) + conv(3, 16, 16);
        tally += conv(2, 16, 8) + conv(3, 16, 8) + conv(3, 8, 8);
        // 1x1 head
        tally += conv(1, 8, 3);
        assert_eq!(tally, 120_843);
        assert_eq!(m.parameter_count(), tally);
    }

    #[test]
    fn eunet_shape_and_scaling() {
        let cfg = SegModelConfig {
            input_size: 128,
            width_mult: 1.0,
            depth_mult: 1.0,
            ..SegModelConfig::eunet_desk()
        };
        let m = build_eunet(&cfg).unwrap();
        let y = m.forward(&random_batch(1, 128, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 128, 128, 3]);
        assert!(y.all_finite());

        let wide = build_eunet(&SegModelConfig {
            width_mult: 2.0,
            ..cfg.clone()
        })
        .unwrap();
        assert!(wide.parameter_count() > m.parameter_count());

        let big = build_eunet(&SegModelConfig {
            input_size: 256,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(big.parameter_count(), m.parameter_count());
    }

    #[test]
    fn eunet_rejects_bad_config() {
        let bad = SegModelConfig {
            width_mult: 0.0,
            ..SegModelConfig::eunet_desk()
        };
        assert!(matches!(build_eunet(&bad), Err(Error::Config { .. })));
        let bad = SegModelConfig {
            depth_stages: 4,
            ..SegModelConfig::eunet_desk()
        };
        assert!(build_eunet(&bad).is_err());
        let bad = SegModelConfig {
            input_size: 100,
            ..SegModelConfig::unet_desk()
        };
        assert!(build_unet(&bad).is_err());
        assert!(build_unet(&SegModelConfig::eunet_desk()).is_err());
    }

    #[test]
    fn forward_contract() {
        let cfg = SegModelConfig {
            base_width: 4,
            depth_stages: 2,
            input_size: 32,
            ..SegModelConfig::unet_desk()
        };
        let m = build_unet(&cfg).unwrap();
        let zeros = Tensor::zeros(&[1, 32, 32, 3]);
        let y = m.forward(&zeros).unwrap();
        assert!(y.all_finite());
        assert!(y.data().iter().all(|&p| (0.0..=1.0).contains(&p)));

        let one = random_batch(1, 32, 3);
        let two = Tensor::stack(&[one.clone(), one]).unwrap();
        let y = m.forward(&two).unwrap();
        let half = y.len() / 2;
        assert_eq!(&y.data()[..half], &y.data()[half..]);
        assert_eq!(y.argmax_last().len(), 32 * 32 * 2);

        assert!(m.forward(&Tensor::zeros(&[1, 64, 64, 3])).is_err());
        assert!(m.forward(&Tensor::zeros(&[1, 32, 32, 4])).is_err());
    }

    #[test]
    fn sigmoid_head_outputs_two_channels() {
        let cfg = SegModelConfig {
            num_classes: 2,
            final_activation: FinalActivation::Sigmoid,
            base_width: 4,
            depth_stages: 2,
            input_size: 16,
            ..SegModelConfig::unet_desk()
        };
        let m = build_unet(&cfg).unwrap();
        let y = m.forward(&random_batch(1, 16, 4)).unwrap();
        assert_eq!(y.shape(), &[1, 16, 16, 2]);
        let bad = SegModelConfig { num_classes: 3, ..cfg };
        assert!(build_unet(&bad).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SegModelConfig {
            base_width: 4,
            depth_stages: 2,
            input_size: 16,
            init_seed: 5,
            ..SegModelConfig::unet_desk()
        };
        let m = build_unet(&cfg).unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p, Some(&Adam::new(m.store()))).unwrap();
        let (back, adam) = SegModel::load(&p, Some(&cfg)).unwrap();
        assert_eq!(back.store(), m.store());
        assert!(adam.is_some());
        let other = SegModelConfig { base_width: 8, ..cfg };
        assert!(matches!(SegModel::load(&p, Some(&other)), Err(Error::Checkpoint(_))));
    }
}
