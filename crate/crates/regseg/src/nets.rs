//! The three small encoder-decoder networks: displacement-field regressor,
//! C-class softmax segmenter, and full-resolution sigmoid discriminator.
//!
//! All three share one U-shaped topology: stride-1 convolutions with 2x2
//! average-pool downsampling, nearest-neighbour upsampling with skip
//! concatenation on the way back up, and a role-specific head at full
//! resolution. Channel width doubles once after the first level and then
//! caps, keeping the desk-scale step budget affordable.

use crate::error::{Error, Result};
use crate::grid::{Grid, Scalar};
use crate::tape::{NodeId, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Reg,
    Seg,
    Disc,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Reg => "reg",
            Role::Seg => "seg",
            Role::Disc => "disc",
        }
    }
}

/// Architecture knobs shared by the three networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub num_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            levels: 3,
            base_channels: 16,
            kernel: 3,
            leaky_slope: 0.2,
            num_classes: 4,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.base_channels < 4 {
            return Err(Error::Config("base_channels must be >= 4".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    /// Encoder output channels per level: base, then doubled and capped.
    fn channels(&self, level: usize) -> usize {
        if level == 0 {
            self.base_channels
        } else {
            self.base_channels * 2
        }
    }
}

/// Named parameter set plus the forward contract for one role.
#[derive(Debug, Clone)]
pub struct NetworkHandle<T: Scalar> {
    pub role: Role,
    pub cfg: ArchConfig,
    in_ch: usize,
    out_ch: usize,
    params: BTreeMap<String, Grid<T>>,
}

/// Parameter leaves of one network bound to a tape, trainable or frozen.
pub struct BoundNet {
    ids: BTreeMap<String, NodeId>,
}

impl BoundNet {
    /// Wraps externally inserted leaves (the gradient-check suite supplies
    /// the parameter leaves itself).
    pub fn from_ids(ids: BTreeMap<String, NodeId>) -> Self {
        BoundNet { ids }
    }
}

fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Grid<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    while data.len() < count {
        // Box-Muller from two uniforms.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(T::from_f64(r * theta.cos() * std));
        if data.len() < count {
            data.push(T::from_f64(r * theta.sin() * std));
        }
    }
    Grid::new(shape.to_vec(), data).expect("init shape")
}

impl<T: Scalar> NetworkHandle<T> {
    /// Builds a network for `role` with seeded He initialisation. The
    /// registration head is zero-initialised so a fresh regressor returns an
    /// identically zero field (identity warp).
    pub fn build(role: Role, cfg: ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (in_ch, out_ch) = match role {
            Role::Reg => (2, 2),
            Role::Seg => (1, cfg.num_classes),
            Role::Disc => (2, 1),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = cfg.kernel;
        let p = role.prefix();
        let mut params = BTreeMap::new();

        let mut prev = in_ch;
        for level in 0..cfg.levels {
            let ch = cfg.channels(level);
            let w = he_normal::<T>(&mut rng, &[ch, prev, k, k], prev * k * k);
            params.insert(format!("{p}.enc{level}.w"), w);
            params.insert(format!("{p}.enc{level}.b"), Grid::zeros(&[ch]));
            prev = ch;
        }
        // Decoder level i consumes up(deeper) concat skip(i) and emits the
        // width of level i-1.
        for level in (1..cfg.levels).rev() {
            let cat = prev + cfg.channels(level);
            let ch = cfg.channels(level - 1);
            let w = he_normal::<T>(&mut rng, &[ch, cat, k, k], cat * k * k);
            params.insert(format!("{p}.dec{level}.w"), w);
            params.insert(format!("{p}.dec{level}.b"), Grid::zeros(&[ch]));
            prev = ch;
        }
        let head_w = if role == Role::Reg {
            Grid::zeros(&[out_ch, prev, k, k])
        } else {
            he_normal::<T>(&mut rng, &[out_ch, prev, k, k], prev * k * k)
        };
        params.insert(format!("{p}.head.w"), head_w);
        params.insert(format!("{p}.head.b"), Grid::zeros(&[out_ch]));

        Ok(NetworkHandle {
            role,
            cfg,
            in_ch,
            out_ch,
            params,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|g| g.len()).sum()
    }

    pub fn params(&self) -> &BTreeMap<String, Grid<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Grid<T>> {
        &mut self.params
    }

    pub fn set_param(&mut self, name: &str, value: Grid<T>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) => {
                if !slot.same_shape(&value) {
                    return Err(Error::shape(
                        "set_param",
                        format!(
                            "parameter '{name}' has shape {:?}, got {:?}",
                            slot.shape(),
                            value.shape()
                        ),
                    ));
                }
                *slot = value;
                Ok(())
            }
            None => Err(Error::Config(format!("unknown parameter '{name}'"))),
        }
    }

    /// Inserts every parameter on the tape, as named leaves when trainable
    /// or as constants when frozen. Bind once per tape; repeated forwards
    /// reuse the same leaves so gradients accumulate across uses.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<BoundNet> {
        let mut ids = BTreeMap::new();
        for (name, value) in &self.params {
            let id = if trainable {
                tape.leaf(name, value.clone())?
            } else {
                tape.constant(value.clone())
            };
            ids.insert(name.clone(), id);
        }
        Ok(BoundNet { ids })
    }

    fn id(&self, bound: &BoundNet, suffix: &str) -> NodeId {
        bound.ids[&format!("{}.{suffix}", self.role.prefix())]
    }

    fn check_input(&self, input: &Grid<T>) -> Result<()> {
        if input.rank() != 3 || input.shape()[0] != self.in_ch {
            return Err(Error::shape(
                "net_forward",
                format!(
                    "{} net expects [{},H,W], got {:?}",
                    self.role.prefix(),
                    self.in_ch,
                    input.shape()
                ),
            ));
        }
        let (h, w) = (input.shape()[1], input.shape()[2]);
        let div = 1usize << self.cfg.levels;
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(
                "net_forward",
                format!(
                    "input {h}x{w} not divisible by 2^levels = {div} ({} net)",
                    self.role.prefix()
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass on the tape. The output is the raw field for `Reg`,
    /// softmax class maps for `Seg`, and a sigmoid confidence map for `Disc`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &BoundNet, input: NodeId) -> Result<NodeId> {
        self.check_input(tape.value(input))?;
        let pad = self.cfg.kernel / 2;
        let slope = self.cfg.leaky_slope;

        let mut skips = Vec::with_capacity(self.cfg.levels);
        let mut x = input;
        for level in 0..self.cfg.levels {
            let w = self.id(bound, &format!("enc{level}.w"));
            let b = self.id(bound, &format!("enc{level}.b"));
            let c = tape.conv2d(x, w, b, 1, pad)?;
            let f = tape.leaky_relu(c, slope);
            skips.push(f);
            x = tape.avg_pool2(f)?;
        }
        for level in (1..self.cfg.levels).rev() {
            let up = tape.resize_nearest_double(x)?;
            let cat = tape.concat_channels(&[up, skips[level]])?;
            let w = self.id(bound, &format!("dec{level}.w"));
            let b = self.id(bound, &format!("dec{level}.b"));
            let c = tape.conv2d(cat, w, b, 1, pad)?;
            x = tape.leaky_relu(c, slope);
        }
        let up = tape.resize_nearest_double(x)?;
        let hw = self.id(bound, "head.w");
        let hb = self.id(bound, "head.b");
        let head = tape.conv2d(up, hw, hb, 1, pad)?;
        match self.role {
            Role::Reg => Ok(head),
            Role::Seg => tape.softmax_channel(head),
            Role::Disc => Ok(tape.sigmoid(head)),
        }
    }

    /// Convenience eager forward on a scratch tape with frozen parameters.
    pub fn forward_plain(&self, input: &Grid<T>) -> Result<Grid<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }
}

pub fn build_reg_net<T: Scalar>(cfg: ArchConfig, seed: u64) -> Result<NetworkHandle<T>> {
    NetworkHandle::build(Role::Reg, cfg, seed)
}

pub fn build_seg_net<T: Scalar>(cfg: ArchConfig, seed: u64) -> Result<NetworkHandle<T>> {
    NetworkHandle::build(Role::Seg, cfg, seed)
}

pub fn build_disc_net<T: Scalar>(cfg: ArchConfig, seed: u64) -> Result<NetworkHandle<T>> {
    NetworkHandle::build(Role::Disc, cfg, seed)
}
