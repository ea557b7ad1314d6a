use rand::Rng;

use super::SegModelConfig;
use crate::nn::layers::{Conv2d, UpConv2d};
use crate::nn::{Graph, ParamStore, Var};

struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        DoubleConv {
            a: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, true, rng),
            b: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, true, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.a.forward(g, x);
        let y = g.relu(y);
        let y = self.b.forward(g, y);
        g.relu(y)
    }
}

/// Contracting path of `depth_stages` double-conv levels with max pooling,
/// a bottleneck, and a symmetric expansive path joined by skip connections.
pub struct UNet {
    down: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    ups: Vec<(UpConv2d, DoubleConv)>,
    head: Conv2d,
}

impl UNet {
    pub(crate) fn new<R: Rng>(cfg: &SegModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let widths: Vec<usize> = (0..=cfg.depth_stages).map(|i| cfg.base_width << i).collect();
        let mut down = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths[..cfg.depth_stages].iter().enumerate() {
            down.push(DoubleConv::new(store, &format!("down{i}"), cin, w, rng));
            cin = w;
        }
        let bottleneck = DoubleConv::new(store, "bottleneck", cin, widths[cfg.depth_stages], rng);
        let mut ups = Vec::new();
        for i in (0..cfg.depth_stages).rev() {
            let (hi, lo) = (widths[i + 1], widths[i]);
            let up = UpConv2d::new(store, &format!("up{i}.upconv"), hi, lo, true, rng);
            let conv = DoubleConv::new(store, &format!("up{i}"), 2 * lo, lo, rng);
            ups.push((up, conv));
        }
        let head = Conv2d::new(store, "head", widths[0], cfg.head_channels(), 1, 1, true, rng);
        UNet {
            down,
            bottleneck,
            ups,
            head,
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut skips = Vec::with_capacity(self.down.len());
        let mut y = x;
        for level in &self.down {
            let s = level.forward(g, y);
            skips.push(s);
            y = g.max_pool2(s);
        }
        y = self.bottleneck.forward(g, y);
        for (up, conv) in &self.ups {
            let u = up.forward(g, y);
            let skip = skips.pop().expect("one skip per level");
            let cat = g.concat(skip, u);
            y = conv.forward(g, cat);
        }
        self.head.forward(g, y)
    }
}
