use rand::Rng;

use super::SegModelConfig;
use crate::nn::layers::{BatchNorm2d, Conv2d, DepthwiseConv2d, UpConv2d};
use crate::nn::{Graph, ParamStore, Var};

/// One stage of inverted-bottleneck blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub expand: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
    pub repeats: usize,
}

/// Encoder layout after applying the width and depth multipliers to the
/// EfficientNet-B0 baseline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EfficientEncoderConfig {
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
}

const B0_STEM: usize = 32;
// (expand, kernel, stride, out, repeats)
const B0_STAGES: [(usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 16, 1),
    (6, 3, 2, 24, 2),
    (6, 5, 2, 40, 2),
    (6, 3, 2, 80, 3),
    (6, 5, 1, 112, 3),
    (6, 5, 2, 192, 4),
    (6, 3, 1, 320, 1),
];

/// Rounds a scaled channel count to a multiple of 8, never dropping more than 10%.
pub(crate) fn make_divisible(v: f64) -> usize {
    let d = 8.0;
    let mut r = (((v + d / 2.0) / d).floor() * d).max(d);
    if r < 0.9 * v {
        r += d;
    }
    r as usize
}

impl EfficientEncoderConfig {
    pub fn scaled(width_mult: f64, depth_mult: f64) -> Self {
        EfficientEncoderConfig {
            stem_channels: make_divisible(B0_STEM as f64 * width_mult),
            stages: B0_STAGES
                .iter()
                .map(|&(expand, kernel, stride, out, repeats)| StageSpec {
                    expand,
                    kernel,
                    stride,
                    out_channels: make_divisible(out as f64 * width_mult),
                    repeats: ((repeats as f64 * depth_mult).ceil() as usize).max(1),
                })
                .collect(),
        }
    }
}

struct MbConv {
    expand: Option<(Conv2d, BatchNorm2d)>,
    dw: DepthwiseConv2d,
    dw_bn: BatchNorm2d,
    se_reduce: Conv2d,
    se_expand: Conv2d,
    project: Conv2d,
    project_bn: BatchNorm2d,
    residual: bool,
}

impl MbConv {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        expand: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let mid = cin * expand;
        let expand = (expand != 1).then(|| {
            (
                Conv2d::new(store, &format!("{name}.expand"), cin, mid, 1, 1, false, rng),
                BatchNorm2d::new(store, &format!("{name}.expand_bn"), mid, rng),
            )
        });
        let se = (cin / 4).max(1);
        MbConv {
            expand,
            dw: DepthwiseConv2d::new(store, &format!("{name}.dw"), mid, k, stride, rng),
            dw_bn: BatchNorm2d::new(store, &format!("{name}.dw_bn"), mid, rng),
            se_reduce: Conv2d::new(store, &format!("{name}.se_reduce"), mid, se, 1, 1, true, rng),
            se_expand: Conv2d::new(store, &format!("{name}.se_expand"), se, mid, 1, 1, true, rng),
            project: Conv2d::new(store, &format!("{name}.project"), mid, cout, 1, 1, false, rng),
            project_bn: BatchNorm2d::new(store, &format!("{name}.project_bn"), cout, rng),
            residual: stride == 1 && cin == cout,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut y = x;
        if let Some((conv, bn)) = &self.expand {
            y = conv.forward(g, y);
            y = bn.forward(g, y);
            y = g.silu(y);
        }
        y = self.dw.forward(g, y);
        y = self.dw_bn.forward(g, y);
        y = g.silu(y);

        let s = g.global_avg_pool(y);
        let s = self.se_reduce.forward(g, s);
        let s = g.silu(s);
        let s = self.se_expand.forward(g, s);
        let s = g.sigmoid(s);
        y = g.scale_channels(y, s);

        y = self.project.forward(g, y);
        y = self.project_bn.forward(g, y);
        if self.residual {
            y = g.add(y, x);
        }
        y
    }
}

struct DecoderBlock {
    up: UpConv2d,
    up_bn: BatchNorm2d,
    conv: Conv2d,
}

impl DecoderBlock {
    fn forward(&self, g: &mut Graph, x: Var, skip: Option<Var>) -> Var {
        let mut y = self.up.forward(g, x);
        y = self.up_bn.forward(g, y);
        y = g.relu(y);
        if let Some(skip) = skip {
            y = g.concat(y, skip);
        }
        y = self.conv.forward(g, y);
        g.relu(y)
    }
}

/// Inverted-bottleneck encoder with five stride-2 reductions and a decoder of
/// five up-convolution modules. The first four take the encoder feature map of
/// matching resolution; the last one works at full resolution, where the
/// encoder has no features.
pub struct EuNet {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    /// Blocks grouped by stage, and whether the stage output feeds a skip.
    stages: Vec<(Vec<MbConv>, bool)>,
    decoder: Vec<DecoderBlock>,
    head: Conv2d,
}

impl EuNet {
    pub(crate) fn new<R: Rng>(cfg: &SegModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let enc = EfficientEncoderConfig::scaled(cfg.width_mult, cfg.depth_mult);
        let stem = Conv2d::new(store, "stem", 3, enc.stem_channels, 3, 2, false, rng);
        let stem_bn = BatchNorm2d::new(store, "stem_bn", enc.stem_channels, rng);

        // A stage feeds a skip when the next stage reduces resolution (or it is
        // the last stage); the deepest one is the decoder input instead.
        let mut stages = Vec::new();
        let mut skip_channels = Vec::new();
        let mut cin = enc.stem_channels;
        for (si, st) in enc.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for r in 0..st.repeats {
                let stride = if r == 0 { st.stride } else { 1 };
                let name = format!("enc{si}.{r}");
                blocks.push(MbConv::new(
                    store,
                    &name,
                    cin,
                    st.out_channels,
                    st.expand,
                    st.kernel,
                    stride,
                    rng,
                ));
                cin = st.out_channels;
            }
            let last_at_res = enc.stages.get(si + 1).is_none_or(|n| n.stride == 2);
            if last_at_res {
                skip_channels.push(st.out_channels);
            }
            stages.push((blocks, last_at_res));
        }
        // skip_channels holds features at 1/2 .. 1/32; the last is the bottleneck.
        let bottleneck = skip_channels.pop().expect("five resolutions");
        debug_assert_eq!(skip_channels.len(), 4);

        let widths: Vec<usize> = [16usize, 8, 4, 2, 1].iter().map(|m| cfg.base_width * m).collect();
        let mut decoder = Vec::new();
        let mut cin = bottleneck;
        for (i, &w) in widths.iter().enumerate() {
            let skip = skip_channels.len().checked_sub(i + 1).map_or(0, |j| skip_channels[j]);
            decoder.push(DecoderBlock {
                up: UpConv2d::new(store, &format!("dec{i}.up"), cin, w, false, rng),
                up_bn: BatchNorm2d::new(store, &format!("dec{i}.up_bn"), w, rng),
                conv: Conv2d::new(store, &format!("dec{i}.conv"), w + skip, w, 3, 1, true, rng),
            });
            cin = w;
        }
        let head = Conv2d::new(store, "head", cin, cfg.head_channels(), 1, 1, true, rng);
        EuNet {
            stem,
            stem_bn,
            stages,
            decoder,
            head,
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut y = self.stem.forward(g, x);
        y = self.stem_bn.forward(g, y);
        y = g.silu(y);
        let mut skips = Vec::new();
        for (blocks, is_skip) in &self.stages {
            for b in blocks {
                y = b.forward(g, y);
            }
            if *is_skip {
                skips.push(y);
            }
        }
        y = skips.pop().expect("bottleneck feature");
        for block in &self.decoder {
            y = block.forward(g, y, skips.pop());
        }
        self.head.forward(g, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_divisible_follows_reference_rounding() {
        assert_eq!(make_divisible(32.0), 32);
        assert_eq!(make_divisible(12.0), 16);
        assert_eq!(make_divisible(20.0), 24);
        assert_eq!(make_divisible(4.0), 8);
        assert_eq!(make_divisible(35.2), 32);
        // B7 widths: 32 * 2.0 = 64, 112 * 2.0 = 224
        assert_eq!(make_divisible(64.0), 64);
        assert_eq!(make_divisible(224.0), 224);
    }

    #[test]
    fn b0_layout_is_the_identity_scaling() {
        let e = EfficientEncoderConfig::scaled(1.0, 1.0);
        assert_eq!(e.stem_channels, 32);
        let outs: Vec<_> = e.stages.iter().map(|s| s.out_channels).collect();
        assert_eq!(outs, [16, 24, 40, 80, 112, 192, 320]);
        let reps: usize = e.stages.iter().map(|s| s.repeats).sum();
        assert_eq!(reps, 16);
        let strides: usize = e.stages.iter().filter(|s| s.stride == 2).count();
        assert_eq!(strides + 1, 5, "stem plus four strided stages");
    }

    #[test]
    fn depth_multiplier_rounds_up() {
        let e = EfficientEncoderConfig::scaled(0.5, 0.5);
        let reps: Vec<_> = e.stages.iter().map(|s| s.repeats).collect();
        assert_eq!(reps, [1, 1, 1, 2, 2, 2, 1]);
        let e = EfficientEncoderConfig::scaled(1.0, 3.1);
        let reps: Vec<_> = e.stages.iter().map(|s| s.repeats).collect();
        assert_eq!(reps, [4, 7, 7, 10, 10, 13, 4]);
    }
}
