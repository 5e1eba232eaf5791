//! U-shaped encoder-decoder used by both segmentation modules and the shadow segmenter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, ParamStore, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    /// Number of 2x downsamplings.
    pub levels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::new(1, 1)
    }
}

impl UNetConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self { in_channels, out_channels, base_channels: 8, levels: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return Err(Error::config("unet", "channel counts must be positive"));
        }
        if self.levels == 0 || self.levels > 6 {
            return Err(Error::config("unet.levels", format!("must be 1..=6, got {}", self.levels)));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    a: Conv2d,
    b: Conv2d,
}

impl Block {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self { a: Conv2d::same3(store, &format!("{name}.a"), cin, cout, rng), b: Conv2d::same3(store, &format!("{name}.b"), cout, cout, rng) }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.a.forward(g, store, x);
        let y = g.instance_norm(y);
        let y = g.relu(y);
        let y = self.b.forward(g, store, y);
        let y = g.instance_norm(y);
        g.relu(y)
    }
}

/// Layer handles; the weights live in the caller's [`ParamStore`].
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    down: Vec<Block>,
    bottom: Block,
    up: Vec<(Conv2d, Block)>,
    head: Conv2d,
}

impl UNet {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, config: UNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ch = |l: usize| config.base_channels << l;
        let mut down = Vec::with_capacity(config.levels);
        let mut cin = config.in_channels;
        for l in 0..config.levels {
            down.push(Block::new(store, &format!("{prefix}.down{l}"), cin, ch(l), rng));
            cin = ch(l);
        }
        let bottom = Block::new(store, &format!("{prefix}.bottom"), cin, ch(config.levels), rng);
        let mut up = Vec::with_capacity(config.levels);
        for l in (0..config.levels).rev() {
            // 1x1 projection after nearest upsampling, then a block over the skip concat
            let proj = Conv2d::pointwise(store, &format!("{prefix}.up{l}.proj"), ch(l + 1), ch(l), rng);
            let block = Block::new(store, &format!("{prefix}.up{l}"), 2 * ch(l), ch(l), rng);
            up.push((proj, block));
        }
        let head = Conv2d::pointwise(store, &format!("{prefix}.head"), ch(0), config.out_channels, rng);
        Ok(Self { config, down, bottom, up, head })
    }

    pub fn config(&self) -> UNetConfig {
        self.config
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let m = self.config.size_multiple();
        if shape[1] != self.config.in_channels || !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Data(format!(
                "U-Net expects {} channels and spatial sizes divisible by {m}, got {shape:?}",
                self.config.in_channels
            )));
        }
        Ok(())
    }

    /// Pre-activation logits `(n, out_channels, h, w)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let mut skips = Vec::with_capacity(self.down.len());
        let mut y = x;
        for block in &self.down {
            y = block.forward(g, store, y);
            skips.push(y);
            y = g.max_pool2(y);
        }
        y = self.bottom.forward(g, store, y);
        for ((proj, block), skip) in self.up.iter().zip(skips.iter().rev()) {
            let u = g.upsample2(y);
            let u = proj.forward(g, store, u);
            let cat = g.concat(&[*skip, u]);
            y = block.forward(g, store, cat);
        }
        self.head.forward(g, store, y)
    }
}
