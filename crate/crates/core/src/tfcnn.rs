//! U-Net segmenter with an optional Conv-GRU bottleneck that threads a hidden
//! state through the frames of a sequence (T-FCNN). With `recurrent = false`
//! the bottleneck is a plain convolution and frames are independent (FCNN).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{clip_global_norm, foreground_probability, BatchStats, Graph, NodeId, Tensor};
use crate::error::{bail, Error, Result};
use crate::metrics::dice;
use crate::nn::ParamSet;
use crate::optim::{Adadelta, AdadeltaConfig};
use crate::sequence::{CineSequence, Image, MaskSequence, ProbSequence};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct NetworkConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub recurrent: bool,
    pub gru_kernel: usize,
    pub input_size: (usize, usize),
    pub clip_norm: Option<f64>,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Longest stretch of frames unrolled for one backward pass.
    pub max_frames: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 8,
            recurrent: true,
            gru_kernel: 3,
            input_size: (64, 64),
            clip_norm: Some(5.0),
            lr: 1.0,
            epochs: 30,
            seed: 0,
            max_frames: 30,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl NetworkConfig {
    /// The frame-independent baseline with otherwise default settings.
    pub fn fcnn() -> Self {
        Self { recurrent: false, clip_norm: None, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            bail!(InvalidArgument, "depth and base_channels must be positive");
        }
        let f = 1usize << self.depth;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            bail!(InvalidArgument, "input size {}x{} is not divisible by 2^{} = {}", h, w, self.depth, f);
        }
        if self.gru_kernel.is_multiple_of(2) {
            bail!(InvalidArgument, "gru_kernel must be odd, got {}", self.gru_kernel);
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                bail!(InvalidArgument, "clip_norm must be positive");
            }
        }
        if !(self.lr > 0.0) || self.max_frames == 0 {
            bail!(InvalidArgument, "lr and max_frames must be positive");
        }
        Ok(())
    }

    pub fn channels(&self, block: usize) -> usize {
        self.base_channels << block
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.depth - 1)
    }

    pub fn bottleneck_size(&self) -> (usize, usize) {
        (self.input_size.0 >> self.depth, self.input_size.1 >> self.depth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvBn {
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
}

/// Parameter indices of a Conv-GRU; `u*` convolutions act on the state and
/// carry no bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruParams<T> {
    pub wz: T,
    pub bz: T,
    pub uz: T,
    pub wr: T,
    pub br: T,
    pub ur: T,
    pub wh: T,
    pub bh: T,
    pub uh: T,
}

impl GruParams<usize> {
    fn nodes(&self, ids: &[NodeId]) -> GruParams<NodeId> {
        GruParams {
            wz: ids[self.wz],
            bz: ids[self.bz],
            uz: ids[self.uz],
            wr: ids[self.wr],
            br: ids[self.br],
            ur: ids[self.ur],
            wh: ids[self.wh],
            bh: ids[self.bh],
            uh: ids[self.uh],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Bottleneck {
    Gru(GruParams<usize>),
    Conv { w: usize, b: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    enc: Vec<[ConvBn; 2]>,
    mid: Bottleneck,
    /// Deepest first.
    dec: Vec<(usize, [ConvBn; 2])>,
    head_w: usize,
    head_b: usize,
}

/// Conv-GRU update `h' = (1 - z) h + z h~` with same-padded convolutions.
pub fn conv_gru_step(g: &mut Graph, x: NodeId, h: NodeId, p: &GruParams<NodeId>, kernel: usize) -> Result<NodeId> {
    let pad = kernel / 2;
    let gate = |g: &mut Graph, w: NodeId, b: NodeId, u: NodeId, state: NodeId| -> Result<NodeId> {
        let a = g.conv2d(x, w, Some(b), 1, pad)?;
        let c = g.conv2d(state, u, None, 1, pad)?;
        g.add(a, c)
    };
    let zs = gate(g, p.wz, p.bz, p.uz, h)?;
    let z = g.sigmoid(zs);
    let rs = gate(g, p.wr, p.br, p.ur, h)?;
    let r = g.sigmoid(rs);
    let rh = g.mul(r, h)?;
    let hs = gate(g, p.wh, p.bh, p.uh, rh)?;
    let cand = g.tanh(hs);
    let diff = g.sub(cand, h)?;
    let step = g.mul(z, diff)?;
    g.add(h, step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses per-frame statistics, which are reported back.
    Train,
    /// Batch norm uses the running statistics.
    Eval,
}

/// A recorded forward pass over one sequence.
#[derive(Debug)]
pub struct SequenceGraph {
    pub graph: Graph,
    /// Parameter leaves, in [`Network::params`] order.
    pub params: Vec<NodeId>,
    /// `[1,H,W]` input leaf per frame.
    pub inputs: Vec<NodeId>,
    /// `[2,H,W]` logits per frame.
    pub logits: Vec<NodeId>,
    /// Mean frame loss, when labels were given.
    pub loss: Option<NodeId>,
    stats: Vec<(usize, BatchStats)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    cfg: NetworkConfig,
    params: ParamSet,
    running: Vec<(String, BatchStats)>,
    layout: Layout,
}

/// One epoch of training.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: Option<f64>,
}

impl Network {
    pub fn build(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamSet::new();
        let mut running = Vec::new();
        let conv_bn = |ps: &mut ParamSet, running: &mut Vec<(String, BatchStats)>, name: String, cin: usize, cout: usize, rng: &mut ChaCha8Rng| {
            let w = ps.push_he(format!("{}.weight", name), &[cout, cin, 3, 3], cin * 9, rng);
            let b = ps.push(format!("{}.bias", name), Tensor::zeros(&[cout]));
            let gamma = ps.push(format!("{}.bn.gamma", name), Tensor::filled(&[cout], 1.0));
            let beta = ps.push(format!("{}.bn.beta", name), Tensor::zeros(&[cout]));
            running.push((format!("{}.bn", name), BatchStats { mean: vec![0.0; cout], var: vec![1.0; cout] }));
            ConvBn { w, b, gamma, beta, bn: running.len() - 1 }
        };
        let mut enc = Vec::with_capacity(cfg.depth);
        let mut cin = 1;
        for k in 0..cfg.depth {
            let c = cfg.channels(k);
            let a = conv_bn(&mut ps, &mut running, format!("enc{}.conv0", k), cin, c, &mut rng);
            let b = conv_bn(&mut ps, &mut running, format!("enc{}.conv1", k), c, c, &mut rng);
            enc.push([a, b]);
            cin = c;
        }
        let cb = cfg.bottleneck_channels();
        let kk = cfg.gru_kernel;
        let mid = if cfg.recurrent {
            let fan = cb * kk * kk;
            let mut gate = |ps: &mut ParamSet, name: &str| {
                let w = ps.push_he(format!("gru.w{}.weight", name), &[cb, cb, kk, kk], fan, &mut rng);
                let b = ps.push(format!("gru.w{}.bias", name), Tensor::zeros(&[cb]));
                let u = ps.push_he(format!("gru.u{}.weight", name), &[cb, cb, kk, kk], fan, &mut rng);
                (w, b, u)
            };
            let (wz, bz, uz) = gate(&mut ps, "z");
            let (wr, br, ur) = gate(&mut ps, "r");
            let (wh, bh, uh) = gate(&mut ps, "h");
            Bottleneck::Gru(GruParams { wz, bz, uz, wr, br, ur, wh, bh, uh })
        } else {
            let w = ps.push_he("mid.conv.weight", &[cb, cb, 3, 3], cb * 9, &mut rng);
            let b = ps.push("mid.conv.bias", Tensor::zeros(&[cb]));
            Bottleneck::Conv { w, b }
        };
        let mut dec = Vec::with_capacity(cfg.depth);
        let mut cin = cb;
        for k in (0..cfg.depth).rev() {
            let c = cfg.channels(k);
            let up = ps.push_he(format!("dec{}.up.weight", k), &[cin, c, 2, 2], cin, &mut rng);
            let a = conv_bn(&mut ps, &mut running, format!("dec{}.conv0", k), 2 * c, c, &mut rng);
            let b = conv_bn(&mut ps, &mut running, format!("dec{}.conv1", k), c, c, &mut rng);
            dec.push((up, [a, b]));
            cin = c;
        }
        let c0 = cfg.channels(0);
        let head_w = ps.push_he("head.weight", &[2, c0, 1, 1], c0, &mut rng);
        let head_b = ps.push("head.bias", Tensor::zeros(&[2]));
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            running,
            layout: Layout { enc, mid, dec, head_w, head_b },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn has_gru(&self) -> bool {
        matches!(self.layout.mid, Bottleneck::Gru(_))
    }

    /// Batch-norm running statistics, by layer name.
    pub fn running_stats(&self) -> &[(String, BatchStats)] {
        &self.running
    }

    pub fn set_running_stats(&mut self, stats: Vec<(String, BatchStats)>) -> Result<()> {
        if stats.len() != self.running.len() {
            bail!(Shape, "expected {} batch-norm layers, got {}", self.running.len(), stats.len());
        }
        for ((name, cur), (new_name, new)) in self.running.iter().zip(&stats) {
            if name != new_name || cur.mean.len() != new.mean.len() || cur.var.len() != new.var.len() {
                bail!(Shape, "batch-norm layer {} does not match {}", new_name, name);
            }
        }
        self.running = stats;
        Ok(())
    }

    fn conv_bn(&self, g: &mut Graph, ids: &[NodeId], x: NodeId, l: &ConvBn, mode: Mode, stats: &mut Vec<(usize, BatchStats)>) -> Result<NodeId> {
        let c = g.conv2d(x, ids[l.w], Some(ids[l.b]), 1, 1)?;
        let r = g.relu(c);
        match mode {
            Mode::Train => {
                let (n, s) = g.batchnorm(r, ids[l.gamma], ids[l.beta], self.cfg.bn_eps)?;
                stats.push((l.bn, s));
                Ok(n)
            }
            Mode::Eval => g.batchnorm_fixed(r, ids[l.gamma], ids[l.beta], &self.running[l.bn].1, self.cfg.bn_eps),
        }
    }

    /// One frame `[1,H,W]` through the network; returns logits and the new state.
    fn frame(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        x: NodeId,
        h: Option<NodeId>,
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let lay = &self.layout;
        let mut skips = Vec::with_capacity(lay.enc.len());
        let mut cur = x;
        for block in &lay.enc {
            let a = self.conv_bn(g, ids, cur, &block[0], mode, stats)?;
            let b = self.conv_bn(g, ids, a, &block[1], mode, stats)?;
            skips.push(b);
            cur = g.maxpool2(b)?;
        }
        let state = match &lay.mid {
            Bottleneck::Gru(p) => {
                let h = match h {
                    Some(h) => h,
                    None => {
                        let (bh, bw) = self.cfg.bottleneck_size();
                        g.leaf(Tensor::zeros(&[self.cfg.bottleneck_channels(), bh, bw]))
                    }
                };
                let next = conv_gru_step(g, cur, h, &p.nodes(ids), self.cfg.gru_kernel)?;
                cur = next;
                Some(next)
            }
            Bottleneck::Conv { w, b } => {
                let c = g.conv2d(cur, ids[*w], Some(ids[*b]), 1, 1)?;
                cur = g.relu(c);
                None
            }
        };
        for ((up, block), skip) in lay.dec.iter().zip(skips.iter().rev()) {
            let u = g.upconv2(cur, ids[*up])?;
            let cat = g.concat(&[u, *skip])?;
            let a = self.conv_bn(g, ids, cat, &block[0], mode, stats)?;
            cur = self.conv_bn(g, ids, a, &block[1], mode, stats)?;
        }
        let logits = g.conv2d(cur, ids[lay.head_w], Some(ids[lay.head_b]), 1, 0)?;
        Ok((logits, state))
    }

    fn check_input(&self, seq: &CineSequence) -> Result<()> {
        if seq.dims() != self.cfg.input_size {
            bail!(Shape, "sequence frames are {:?}, network expects {:?}", seq.dims(), self.cfg.input_size);
        }
        Ok(())
    }

    /// Records the forward pass over `frames` (state zeroed at the first one)
    /// and, if `labels` is given, the mean cross-entropy over frames.
    pub fn record(&self, frames: &[Image], labels: Option<&MaskSequence>, mode: Mode) -> Result<SequenceGraph> {
        if frames.is_empty() {
            bail!(InvalidArgument, "empty sequence");
        }
        if let Some(l) = labels {
            if l.len() != frames.len() {
                bail!(Shape, "{} frames but {} masks", frames.len(), l.len());
            }
        }
        let mut g = Graph::new();
        let ids = self.params.leaves(&mut g);
        let (h, w) = self.cfg.input_size;
        let mut stats = Vec::new();
        let mut state = None;
        let mut logits = Vec::with_capacity(frames.len());
        let mut inputs = Vec::with_capacity(frames.len());
        let mut losses = Vec::new();
        for (t, f) in frames.iter().enumerate() {
            if f.dims() != (h, w) {
                bail!(Shape, "frame {} is {:?}, network expects {:?}", t, f.dims(), (h, w));
            }
            let x = g.leaf(Tensor::new(&[1, h, w], f.data().to_vec())?);
            inputs.push(x);
            let (l, s) = self.frame(&mut g, &ids, x, state, mode, &mut stats)?;
            state = s;
            logits.push(l);
            if let Some(lab) = labels {
                losses.push(g.softmax_ce(l, lab.masks()[t].data())?);
            }
        }
        let loss = if losses.is_empty() { None } else { Some(g.mean(&losses)?) };
        Ok(SequenceGraph { graph: g, params: ids, inputs, logits, loss, stats })
    }

    /// Foreground probabilities for every frame, in temporal order.
    pub fn forward_sequence(&self, seq: &CineSequence) -> Result<ProbSequence> {
        self.check_input(seq)?;
        let sg = self.record(seq.frames(), None, Mode::Eval)?;
        let (h, w) = self.cfg.input_size;
        let probs = sg
            .logits
            .iter()
            .map(|&l| Image::new(h, w, foreground_probability(sg.graph.value(l))?))
            .collect::<Result<Vec<_>>>()?;
        ProbSequence::new(probs)
    }

    pub fn infer(&self, seq: &CineSequence, threshold: f64) -> Result<MaskSequence> {
        Ok(self.forward_sequence(seq)?.threshold(threshold))
    }

    fn update_running(&mut self, stats: &[(usize, BatchStats)]) {
        let m = self.cfg.bn_momentum;
        for (idx, s) in stats {
            let r = &mut self.running[*idx].1;
            for (a, b) in r.mean.iter_mut().zip(&s.mean) {
                *a = m * *a + (1.0 - m) * b;
            }
            for (a, b) in r.var.iter_mut().zip(&s.var) {
                *a = m * *a + (1.0 - m) * b;
            }
        }
    }

    /// Backpropagation through time over each training sequence (in windows of
    /// at most `max_frames`), one Adadelta step per window. Returns one log
    /// entry per epoch; validation Dice is the mean over validation frames.
    pub fn train(
        &mut self,
        train: &[(CineSequence, MaskSequence)],
        validation: &[(CineSequence, MaskSequence)],
    ) -> Result<Vec<EpochLog>> {
        self.train_with(train, validation, |_| {})
    }

    /// As [`Network::train`], calling `on_epoch` after every epoch.
    pub fn train_with(
        &mut self,
        train: &[(CineSequence, MaskSequence)],
        validation: &[(CineSequence, MaskSequence)],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        if train.is_empty() {
            bail!(InvalidArgument, "training split is empty");
        }
        for (s, m) in train.iter().chain(validation) {
            self.check_input(s)?;
            if !m.matches(s) {
                bail!(Shape, "masks of {} do not match its frames", s.subject_id());
            }
        }
        let mut windows: Vec<(usize, usize)> = Vec::new();
        for (i, (s, _)) in train.iter().enumerate() {
            let mut start = 0;
            while start < s.len() {
                windows.push((i, start));
                start += self.cfg.max_frames;
            }
        }
        let mut opt = Adadelta::new(AdadeltaConfig { lr: self.cfg.lr, ..AdadeltaConfig::default() }, self.params.sizes());
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5E_ED0F_DA7A);
        let mut history = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            windows.shuffle(&mut rng);
            let mut total = 0.0;
            for &(i, start) in &windows {
                let (seq, masks) = &train[i];
                let end = (start + self.cfg.max_frames).min(seq.len());
                let labels = MaskSequence::new(masks.masks()[start..end].to_vec())?;
                let mut sg = self.record(&seq.frames()[start..end], Some(&labels), Mode::Train)?;
                let loss = sg.loss.expect("labels given");
                let value = sg.graph.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {} at epoch {} on {} frames {}..{}",
                        value,
                        epoch,
                        seq.subject_id(),
                        start,
                        end
                    )));
                }
                total += value;
                sg.graph.backward(loss)?;
                let mut grads = self.params.grads(&mut sg.graph, &sg.params);
                if let Some(c) = self.cfg.clip_norm {
                    clip_global_norm(&mut grads, c);
                }
                opt.step(&mut self.params.data_mut(), &grads)?;
                self.update_running(&sg.stats);
            }
            let val_dice = if validation.is_empty() { None } else { Some(self.mean_dice(validation)?) };
            let log = EpochLog { epoch, train_loss: total / windows.len() as f64, val_dice };
            on_epoch(&log);
            history.push(log);
        }
        Ok(history)
    }

    /// Mean per-frame Dice of thresholded predictions.
    pub fn mean_dice(&self, data: &[(CineSequence, MaskSequence)]) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (s, m) in data {
            let pred = self.infer(s, 0.5)?;
            for (p, t) in pred.masks().iter().zip(m.masks()) {
                sum += dice(p, t)?;
                n += 1;
            }
        }
        Ok(sum / n.max(1) as f64)
    }
}
