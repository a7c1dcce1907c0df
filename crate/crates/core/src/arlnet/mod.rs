//! The model graph: encoder f, relation operator, trunk g, relative heads
//! r_c / r_a, absolute heads h_c / h_a and the feedback wiring between them.
//!
//! Everything is built on a [`Tape`] per step. Parameters live in a
//! [`ParameterStore`] and are copied onto the tape by [`ParameterStore::bind`].

mod baseline;
mod checkpoint;

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, RunningStats, Tape, Var};
use crate::data::{Dataset, Episode, Image, UnsupBatch};
use crate::error::{dim_err, ArlError, Result};
use crate::tensor::{r, Real, Tensor};

pub use baseline::BaselineNet;
pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, Checkpoint, CheckpointHeader, FORMAT_VERSION};

pub const BLOCKS: usize = 4;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Supervised,
    Unsupervised,
}

/// Architecture descriptor. Fixes the parameter layout and its order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub mode: Mode,
    pub in_channels: usize,
    pub side: usize,
    pub enc_channels: usize,
    pub trunk_channels: usize,
    /// Hidden width of r_c.
    pub hidden: usize,
    /// A: attribute length (key bits when unsupervised).
    pub attr_dim: usize,
    /// C_train: training vocabulary size (key bits when unsupervised).
    pub num_classes: usize,
    /// B: output length of r_a.
    pub rel_bins: usize,
    /// h_c and h_a are built.
    pub absolute: bool,
    /// r_a is built.
    pub semantic: bool,
    pub abs_feedback: bool,
    pub rel_feedback: bool,
    pub detach_feedback: bool,
}

impl Descriptor {
    /// Plain relation network: encoder, trunk and r_c only.
    pub fn baseline(side: usize, channels: usize, hidden: usize) -> Descriptor {
        Descriptor {
            mode: Mode::Supervised,
            in_channels: 3,
            side,
            enc_channels: channels,
            trunk_channels: channels,
            hidden,
            attr_dim: 0,
            num_classes: 0,
            rel_bins: 1,
            absolute: false,
            semantic: false,
            abs_feedback: false,
            rel_feedback: false,
            detach_feedback: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ArlError::Contract(m));
        if self.side >> BLOCKS == 0 {
            return Err(dim_err(
                "encode",
                format!("side {} cannot pass {} 2x2 pooling stages", self.side, BLOCKS),
            ));
        }
        if self.in_channels == 0 || self.enc_channels == 0 || self.trunk_channels == 0 || self.hidden == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.semantic && self.rel_bins == 0 {
            return bad("r_a needs B >= 1".into());
        }
        if self.absolute && (self.num_classes == 0 || self.attr_dim == 0) {
            return bad("absolute heads need C_train >= 1 and A >= 1".into());
        }
        if self.abs_feedback && !self.absolute {
            return bad("absolute feedback needs the absolute heads".into());
        }
        if self.rel_feedback && !self.semantic {
            return bad("relative feedback needs r_a".into());
        }
        Ok(())
    }

    /// Spatial side of Φ (floor pooling after every encoder block).
    pub fn phi_side(&self) -> usize {
        self.side >> BLOCKS
    }

    /// Trunk blocks pool only while the map is larger than 1x1.
    pub fn trunk_pools(&self) -> [bool; BLOCKS] {
        let mut s = self.phi_side();
        let mut out = [false; BLOCKS];
        for p in &mut out {
            *p = s > 1;
            if *p {
                s /= 2;
            }
        }
        out
    }

    pub fn trunk_side_out(&self) -> usize {
        let mut s = self.phi_side();
        for p in self.trunk_pools() {
            if p {
                s /= 2;
            }
        }
        s
    }

    /// Channels added to ψ^(l-1) by the absolute feedback.
    pub fn feedback_channels(&self) -> usize {
        if self.abs_feedback {
            2 * (self.num_classes + self.attr_dim)
        } else {
            0
        }
    }

    /// Length of the flattened trunk output ψ̂.
    pub fn trunk_dim(&self) -> usize {
        self.trunk_channels * self.trunk_side_out().pow(2)
    }

    pub fn rc_input(&self) -> usize {
        self.trunk_dim() + if self.rel_feedback { self.rel_bins } else { 0 }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("descriptor serializes")
    }
}

/// Sub-network owning a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Encoder,
    Trunk,
    RelClass,
    RelSemantic,
    AbsClass,
    AbsSemantic,
}

impl Group {
    pub fn of(name: &str) -> Group {
        match name.split('.').next() {
            Some("enc") => Group::Encoder,
            Some("trunk") => Group::Trunk,
            Some("rc") => Group::RelClass,
            Some("ra") => Group::RelSemantic,
            Some("hc") => Group::AbsClass,
            Some("ha") => Group::AbsSemantic,
            _ => panic!("unknown parameter group for `{}`", name),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

pub(crate) struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv_slots(prefix: &str, cin: usize, cout: usize, slots: &mut Vec<Slot>, bns: &mut Vec<(String, usize)>) {
    let mut add = |suffix: &str, shape: Vec<usize>, init| {
        slots.push(Slot {
            name: format!("{}.{}", prefix, suffix),
            shape,
            init,
        })
    };
    add("conv.w", vec![cout, cin, 3, 3], Init::FanIn(cin * 9));
    add("conv.b", vec![cout], Init::Zeros);
    add("bn.gamma", vec![cout], Init::Ones);
    add("bn.beta", vec![cout], Init::Zeros);
    bns.push((format!("{}.bn", prefix), cout));
}

pub(crate) fn fc_slots(prefix: &str, din: usize, dout: usize, slots: &mut Vec<Slot>) {
    slots.push(Slot {
        name: format!("{}.w", prefix),
        shape: vec![dout, din],
        init: Init::FanIn(din),
    });
    slots.push(Slot {
        name: format!("{}.b", prefix),
        shape: vec![dout],
        init: Init::Zeros,
    });
}

/// Parameter and batch-norm layout in serialization order.
pub(crate) fn layout(d: &Descriptor) -> (Vec<Slot>, Vec<(String, usize)>) {
    let (mut slots, mut bns) = (Vec::new(), Vec::new());
    let k = d.enc_channels;
    for b in 0..BLOCKS {
        let cin = if b == 0 { d.in_channels } else { k };
        conv_slots(&format!("enc.{}", b), cin, k, &mut slots, &mut bns);
    }
    let t = d.trunk_channels;
    for b in 0..BLOCKS {
        let cin = match b {
            0 => 2 * k,
            3 => t + d.feedback_channels(),
            _ => t,
        };
        conv_slots(&format!("trunk.{}", b), cin, t, &mut slots, &mut bns);
    }
    fc_slots("rc.fc1", d.rc_input(), d.hidden, &mut slots);
    fc_slots("rc.fc2", d.hidden, 1, &mut slots);
    if d.semantic {
        fc_slots("ra.fc", d.trunk_dim(), d.rel_bins, &mut slots);
    }
    if d.absolute {
        fc_slots("hc.fc", k, d.num_classes, &mut slots);
        fc_slots("ha.fc", k, d.attr_dim, &mut slots);
    }
    (slots, bns)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Initial value of one named parameter. Depends only on (seed, name, shape),
/// so every network naming a parameter alike starts from the same values.
pub(crate) fn init_tensor<T: Real>(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::FanIn(fan_in) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        }
    };
    Tensor::from_f64(shape, &data).expect("shape matches")
}

/// Named parameters of f, g, r_c, r_a, h_c, h_a plus batch-norm running stats.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    descriptor: Descriptor,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    bn_names: Vec<String>,
    stats: Vec<RunningStats<T>>,
    index: Arc<HashMap<String, usize>>,
    bn_index: Arc<HashMap<String, usize>>,
}

impl<T: Real> ParameterStore<T> {
    /// Freshly initialized store. Running stats start at mean 0, variance 1.
    pub fn new(descriptor: Descriptor, seed: u64) -> Result<Self> {
        descriptor.validate()?;
        let (slots, bns) = layout(&descriptor);
        let tensors = slots.iter().map(|s| init_tensor(seed, &s.name, &s.shape, s.init)).collect();
        let names = slots.into_iter().map(|s| s.name).collect();
        let stats = bns.iter().map(|(_, c)| RunningStats::standard(*c)).collect();
        let bn_names = bns.into_iter().map(|(n, _)| n).collect();
        Ok(Self::assemble(descriptor, names, tensors, bn_names, stats))
    }

    pub(crate) fn assemble(
        descriptor: Descriptor,
        names: Vec<String>,
        tensors: Vec<Tensor<T>>,
        bn_names: Vec<String>,
        stats: Vec<RunningStats<T>>,
    ) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let bn_index = bn_names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ParameterStore {
            descriptor,
            names,
            tensors,
            bn_names,
            stats,
            index: Arc::new(index),
            bn_index: Arc::new(bn_index),
        }
    }

    pub fn descriptor(&self) -> &Descriptor {
        &self.descriptor
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    pub fn stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            descriptor: self.descriptor.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            bn_names: self.bn_names.clone(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect(),
                    var: s.var.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect(),
                    initialized: s.initialized,
                })
                .collect(),
            index: self.index.clone(),
            bn_index: self.bn_index.clone(),
        }
    }

    /// Put every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Net {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        self.net(vars)
    }

    /// Put every parameter on the tape as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Net {
        let vars = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        self.net(vars)
    }

    fn net(&self, vars: Vec<Var>) -> Net {
        Net {
            desc: self.descriptor.clone(),
            vars,
            index: self.index.clone(),
            bn_index: self.bn_index.clone(),
        }
    }

    pub fn train_phase(&mut self) -> Phase<'_, T> {
        Phase::Train { stats: &mut self.stats }
    }

    pub fn eval_phase(&self) -> Phase<'_, T> {
        Phase::Eval { stats: &self.stats }
    }
}

/// Parameters bound to one tape.
#[derive(Clone, Debug)]
pub struct Net {
    desc: Descriptor,
    vars: Vec<Var>,
    index: Arc<HashMap<String, usize>>,
    bn_index: Arc<HashMap<String, usize>>,
}

impl Net {
    pub fn descriptor(&self) -> &Descriptor {
        &self.desc
    }

    /// Leaves in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    fn p(&self, name: &str) -> Var {
        self.var(name).unwrap_or_else(|| panic!("parameter `{}` missing from layout", name))
    }

    fn bn(&self, name: &str) -> usize {
        self.bn_index[name]
    }
}

/// Batch-norm behaviour for one forward pass.
pub enum Phase<'a, T> {
    Train { stats: &'a mut [RunningStats<T>] },
    Eval { stats: &'a [RunningStats<T>] },
}

impl<T: Real> Phase<'_, T> {
    fn mode(&mut self, i: usize) -> BnMode<'_, T> {
        match self {
            Phase::Train { stats } => BnMode::Train {
                stats: &mut stats[i],
                momentum: r(BN_MOMENTUM),
            },
            Phase::Eval { stats } => BnMode::Eval { stats: &stats[i] },
        }
    }
}

/// Stack images into an `[N, C, H, W]` tensor.
pub fn images_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| ArlError::Contract("no images to stack".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        if (im.channels, im.height, im.width) != (c, h, w) {
            return Err(dim_err(
                "images_tensor",
                format!("image {}x{}x{} differs from {}x{}x{}", im.channels, im.height, im.width, c, h, w),
            ));
        }
        data.extend(im.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

pub fn dataset_images<T: Real>(ds: &Dataset, instances: &[usize]) -> Result<Tensor<T>> {
    let ims: Vec<&Image> = instances.iter().map(|&i| ds.image(i)).collect();
    images_tensor(&ims)
}

fn conv_block<T: Real>(
    tape: &mut Tape<T>,
    net: &Net,
    phase: &mut Phase<'_, T>,
    prefix: &str,
    x: Var,
    pool: bool,
) -> Result<Var> {
    let p = |s: &str| net.p(&format!("{}.{}", prefix, s));
    let y = tape.conv2d(x, p("conv.w"), p("conv.b"), 1, 1)?;
    let bn = net.bn(&format!("{}.bn", prefix));
    let y = tape.batchnorm2d(y, p("bn.gamma"), p("bn.beta"), phase.mode(bn), r(BN_EPS))?;
    let y = tape.relu(y);
    if pool {
        tape.maxpool2x2(y)
    } else {
        Ok(y)
    }
}

/// f: images `[N, C, side, side]` -> Φ `[N, K, s, s]`.
pub fn encode<T: Real>(tape: &mut Tape<T>, net: &Net, phase: &mut Phase<'_, T>, images: Var) -> Result<Var> {
    let d = &net.desc;
    let s = tape.shape(images);
    if s.len() != 4 || s[1] != d.in_channels || s[2] != d.side || s[3] != d.side {
        return Err(dim_err(
            "encode",
            format!(
                "expected [N, {}, {}, {}] images, got {:?}",
                d.in_channels, d.side, d.side, s
            ),
        ));
    }
    let mut x = images;
    for b in 0..BLOCKS {
        x = conv_block(tape, net, phase, &format!("enc.{}", b), x, true)?;
    }
    debug_assert_eq!(tape.shape(x)[1..], [d.enc_channels, d.phi_side(), d.phi_side()]);
    Ok(x)
}

/// Relation operator: channel concatenation, support side first.
pub fn relate<T: Real>(tape: &mut Tape<T>, support: Var, query: Var) -> Result<Var> {
    if tape.shape(support) != tape.shape(query) {
        return Err(dim_err(
            "relate",
            format!(
                "support {:?} and query {:?} descriptors differ",
                tape.shape(support),
                tape.shape(query)
            ),
        ));
    }
    tape.concat(&[support, query], 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stop {
    /// ψ^(l-1): after block 3, before the feedback injection point.
    BeforeLast,
    /// Flattened ψ after block 4.
    Full,
}

pub fn trunk_forward<T: Real>(
    tape: &mut Tape<T>,
    net: &Net,
    phase: &mut Phase<'_, T>,
    x: Var,
    stop: Stop,
) -> Result<Var> {
    let pools = net.desc.trunk_pools();
    let mut x = x;
    for (b, &pool) in pools.iter().enumerate().take(BLOCKS - 1) {
        x = conv_block(tape, net, phase, &format!("trunk.{}", b), x, pool)?;
    }
    match stop {
        Stop::BeforeLast => Ok(x),
        Stop::Full => trunk_last(tape, net, phase, x),
    }
}

/// g^(l): last trunk block, then flatten.
pub fn trunk_last<T: Real>(tape: &mut Tape<T>, net: &Net, phase: &mut Phase<'_, T>, x: Var) -> Result<Var> {
    let pool = net.desc.trunk_pools()[BLOCKS - 1];
    let y = conv_block(tape, net, phase, &format!("trunk.{}", BLOCKS - 1), x, pool)?;
    let y = tape.flatten(y)?;
    debug_assert_eq!(tape.shape(y)[1], net.desc.trunk_dim());
    Ok(y)
}

/// Absolute predictions for a set of rows: class logits c* and attributes a*.
#[derive(Clone, Copy, Debug)]
pub struct AbsOut {
    pub c: Var,
    pub a: Var,
}

impl AbsOut {
    fn gather<T: Real>(self, tape: &mut Tape<T>, idx: &[usize]) -> Result<AbsOut> {
        Ok(AbsOut {
            c: tape.gather(self.c, idx)?,
            a: tape.gather(self.a, idx)?,
        })
    }
}

/// h_c: GAP -> FC logits; h_a: GAP -> FC -> sigmoid.
pub fn absolute_heads<T: Real>(tape: &mut Tape<T>, net: &Net, phi: Var) -> Result<AbsOut> {
    if !net.desc.absolute {
        return Err(ArlError::Contract("absolute heads are not part of this network".into()));
    }
    let g = tape.global_avg_pool(phi)?;
    let c = tape.fully_connected(g, net.p("hc.fc.w"), net.p("hc.fc.b"))?;
    let a = tape.fully_connected(g, net.p("ha.fc.w"), net.p("ha.fc.b"))?;
    let a = tape.sigmoid(a);
    Ok(AbsOut { c, a })
}

/// Tile the absolute predictions of both sides over ψ^(l-1) and append them
/// as channels: `[ψ, c*_i, c*_j, a*_i, a*_j]`.
pub fn absolute_feedback<T: Real>(
    tape: &mut Tape<T>,
    net: &Net,
    psi: Var,
    left: AbsOut,
    right: AbsOut,
) -> Result<Var> {
    let d = &net.desc;
    if !d.abs_feedback {
        return Err(ArlError::Contract("absolute feedback is switched off".into()));
    }
    let s = tape.shape(psi).to_vec();
    if s.len() != 4 {
        return Err(dim_err("absolute_feedback", format!("ψ must be NCHW, got {:?}", s)));
    }
    let mut parts = vec![psi];
    for (v, is_class) in [(left.c, true), (right.c, true), (left.a, false), (right.a, false)] {
        let v = if d.detach_feedback { tape.detach(v) } else { v };
        let v = match (is_class, d.mode) {
            (true, Mode::Supervised) => tape.softmax(v, 1)?,
            // key bits are independent binary targets
            (true, Mode::Unsupervised) => tape.sigmoid(v),
            (false, _) => v,
        };
        parts.push(tape.tile_spatial(v, s[2], s[3])?);
    }
    let out = tape.concat(&parts, 1)?;
    debug_assert_eq!(tape.shape(out)[1], d.trunk_channels + d.feedback_channels());
    Ok(out)
}

/// r_a: FC -> sigmoid `[P, B]`; r_c: FC -> ReLU -> FC -> sigmoid `[P]`,
/// reading `[ψ̂, â*]` when relative feedback is on.
pub fn relative_heads<T: Real>(tape: &mut Tape<T>, net: &Net, psi: Var) -> Result<(Var, Option<Var>)> {
    let d = &net.desc;
    let a_rel = if d.semantic {
        let a = tape.fully_connected(psi, net.p("ra.fc.w"), net.p("ra.fc.b"))?;
        Some(tape.sigmoid(a))
    } else {
        None
    };
    let input = match a_rel {
        Some(a) if d.rel_feedback => {
            let a = if d.detach_feedback { tape.detach(a) } else { a };
            tape.concat(&[psi, a], 1)?
        }
        _ => psi,
    };
    let h = tape.fully_connected(input, net.p("rc.fc1.w"), net.p("rc.fc1.b"))?;
    let h = tape.relu(h);
    let c = tape.fully_connected(h, net.p("rc.fc2.w"), net.p("rc.fc2.b"))?;
    let c = tape.sigmoid(c);
    let p = tape.shape(c)[0];
    let c = tape.reshape(c, &[p])?;
    Ok((c, a_rel))
}

/// Intermediate and final values of one batch of relation pairs.
#[derive(Clone, Copy, Debug)]
pub struct PairPass {
    /// ψ^(l-1), `[P, T, s, s]`.
    pub psi_pre: Var,
    /// Flattened ψ̂, `[P, D]`.
    pub psi_hat: Var,
    /// ĉ*, `[P]`.
    pub c_rel: Var,
    /// â*, `[P, B]`.
    pub a_rel: Option<Var>,
}

/// Score pairs `(left row, right row)` of two descriptor batches.
#[allow(clippy::too_many_arguments)]
pub fn relation_pass<T: Real>(
    tape: &mut Tape<T>,
    net: &Net,
    phase: &mut Phase<'_, T>,
    left: Var,
    right: Var,
    left_abs: Option<AbsOut>,
    right_abs: Option<AbsOut>,
    pairs: &[(usize, usize)],
) -> Result<PairPass> {
    let li: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let ri: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let l = tape.gather(left, &li)?;
    let rr = tape.gather(right, &ri)?;
    let x = relate(tape, l, rr)?;
    let psi_pre = trunk_forward(tape, net, phase, x, Stop::BeforeLast)?;
    let fed = if net.desc.abs_feedback {
        let missing = || ArlError::Contract("absolute feedback needs absolute predictions for both sides".into());
        let la = left_abs.ok_or_else(missing)?.gather(tape, &li)?;
        let ra = right_abs.ok_or_else(missing)?.gather(tape, &ri)?;
        absolute_feedback(tape, net, psi_pre, la, ra)?
    } else {
        psi_pre
    };
    let psi_hat = trunk_last(tape, net, phase, fed)?;
    let (c_rel, a_rel) = relative_heads(tape, net, psi_hat)?;
    Ok(PairPass {
        psi_pre,
        psi_hat,
        c_rel,
        a_rel,
    })
}

/// Every (class, query) pair, query-major: pair `q * way + c`.
pub fn episode_pairs(way: usize, n_query: usize) -> Vec<(usize, usize)> {
    (0..n_query).flat_map(|q| (0..way).map(move |c| (c, q))).collect()
}

/// Everything computed for one supervised episode.
#[derive(Clone, Debug)]
pub struct ForwardBundle {
    /// Φ for support then query images.
    pub phi: Var,
    /// Shot-pooled support descriptors, one per class.
    pub protos: Var,
    /// Absolute predictions for every image of the episode.
    pub abs: Option<AbsOut>,
    pub pairs: Vec<(usize, usize)>,
    pub pass: PairPass,
}

/// Episode forward: encode, pool shots, absolute heads, relation pairs.
pub fn episode_forward<T: Real>(
    tape: &mut Tape<T>,
    net: &Net,
    phase: &mut Phase<'_, T>,
    ep: &Episode,
    ds: &Dataset,
) -> Result<ForwardBundle> {
    let images = tape.constant(dataset_images(ds, &ep.all_instances())?);
    let phi = encode(tape, net, phase, images)?;
    let ns = ep.support.len();
    let q_idx: Vec<usize> = (ns..ns + ep.query.len()).collect();
    let protos = tape.group_mean(phi, &ep.support_groups())?;
    let queries = tape.gather(phi, &q_idx)?;
    let abs = if net.desc.absolute {
        Some(absolute_heads(tape, net, phi)?)
    } else {
        None
    };
    let (proto_abs, query_abs) = match abs {
        Some(a) if net.desc.abs_feedback => (
            Some(absolute_heads(tape, net, protos)?),
            Some(a.gather(tape, &q_idx)?),
        ),
        _ => (None, None),
    };
    let pairs = episode_pairs(ep.way, ep.query.len());
    let pass = relation_pass(tape, net, phase, protos, queries, proto_abs, query_abs, &pairs)?;
    Ok(ForwardBundle {
        phi,
        protos,
        abs,
        pairs,
        pass,
    })
}

/// Row layout of an unsupervised batch: pair `p` holds X augmentations at
/// `2pM..2pM+M` and Y at `2pM+M..2pM+2M`. Relation pairs per source pair are
/// ζ (X,X), ζ* (Y,Y) and ζ' (X,Y), each `M x M` row-major.
pub fn unsup_pairs(n_pairs: usize, m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n_pairs * 3 * m * m);
    for p in 0..n_pairs {
        let (x, y) = (2 * p * m, 2 * p * m + m);
        for (a, b) in [(x, x), (y, y), (x, y)] {
            for i in 0..m {
                for j in 0..m {
                    out.push((a + i, b + j));
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct UnsupForward {
    pub phi: Var,
    pub abs: Option<AbsOut>,
    pub pairs: Vec<(usize, usize)>,
    pub pass: PairPass,
    pub n_pairs: usize,
    pub m: usize,
}

impl UnsupForward {
    /// `[ζ, ζ*, ζ']` per source pair, each `[M, M]`.
    pub fn matrices<T: Real>(&self, tape: &Tape<T>) -> Vec<[Tensor<T>; 3]> {
        let v = tape.value(self.pass.c_rel).data();
        let mm = self.m * self.m;
        (0..self.n_pairs)
            .map(|p| {
                let block = |k: usize| {
                    let start = (3 * p + k) * mm;
                    Tensor::new(vec![self.m, self.m], v[start..start + mm].to_vec()).expect("M x M")
                };
                [block(0), block(1), block(2)]
            })
            .collect()
    }

    /// 1 for within-source pairs (ζ, ζ*), 0 for cross-source (ζ').
    pub fn contrast_targets(&self) -> Vec<f64> {
        let mm = self.m * self.m;
        (0..self.n_pairs)
            .flat_map(|_| {
                std::iter::repeat(1.0)
                    .take(2 * mm)
                    .chain(std::iter::repeat(0.0).take(mm))
            })
            .collect()
    }
}

pub fn unsup_images(batch: &UnsupBatch) -> Vec<&Image> {
    batch
        .pairs
        .iter()
        .flat_map(|p| p.x.images.iter().chain(&p.y.images))
        .collect()
}

/// Contrastive forward over augmentation sets.
pub fn unsup_forward<T: Real>(
    tape: &mut Tape<T>,
    net: &Net,
    phase: &mut Phase<'_, T>,
    batch: &UnsupBatch,
) -> Result<UnsupForward> {
    if batch.m < 2 {
        return Err(ArlError::Contract(format!("unsup_forward needs M >= 2, got {}", batch.m)));
    }
    let images = tape.constant(images_tensor(&unsup_images(batch))?);
    let phi = encode(tape, net, phase, images)?;
    let abs = if net.desc.absolute {
        Some(absolute_heads(tape, net, phi)?)
    } else {
        None
    };
    let pairs = unsup_pairs(batch.pairs.len(), batch.m);
    let fb = if net.desc.abs_feedback { abs } else { None };
    let pass = relation_pass(tape, net, phase, phi, phi, fb, fb, &pairs)?;
    Ok(UnsupForward {
        phi,
        abs,
        pairs,
        pass,
        n_pairs: batch.pairs.len(),
        m: batch.m,
    })
}

#[cfg(test)]
mod tests;
