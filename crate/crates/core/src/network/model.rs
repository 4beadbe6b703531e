//! Model assembly: backbone layouts, DR blocks, SCFBs, the two fusion
//! directions, attention fusion, and the per-topology forward graphs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{NodeId, Param, Tape};
use super::tensor::Tensor;
use crate::error::{config_err, data_err, CrowdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backbone {
    #[serde(rename = "vgg16_layout")]
    Vgg16Layout,
    #[serde(rename = "tiny")]
    Tiny,
}

impl Backbone {
    pub fn as_str(&self) -> &'static str {
        match self {
            Backbone::Vgg16Layout => "vgg16_layout",
            Backbone::Tiny => "tiny",
        }
    }
}

impl std::str::FromStr for Backbone {
    type Err = CrowdError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "vgg16_layout" => Backbone::Vgg16Layout,
            "tiny" => Backbone::Tiny,
            other => return config_err(format!("unknown backbone '{other}'")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    #[serde(rename = "NONE")]
    None,
    #[serde(rename = "FLAT_ADD")]
    FlatAdd,
    #[serde(rename = "FLAT_CONCAT")]
    FlatConcat,
    #[serde(rename = "BT")]
    Bt,
    #[serde(rename = "TB")]
    Tb,
    #[serde(rename = "BTTB")]
    Bttb,
    #[serde(rename = "MBTTBF")]
    Mbttbf,
}

impl Topology {
    pub fn as_str(&self) -> &'static str {
        match self {
            Topology::None => "NONE",
            Topology::FlatAdd => "FLAT_ADD",
            Topology::FlatConcat => "FLAT_CONCAT",
            Topology::Bt => "BT",
            Topology::Tb => "TB",
            Topology::Bttb => "BTTB",
            Topology::Mbttbf => "MBTTBF",
        }
    }

    pub const ALL: [Topology; 7] = [
        Topology::None,
        Topology::FlatAdd,
        Topology::FlatConcat,
        Topology::Bt,
        Topology::Tb,
        Topology::Bttb,
        Topology::Mbttbf,
    ];
}

impl std::str::FromStr for Topology {
    type Err = CrowdError;
    fn from_str(s: &str) -> Result<Self> {
        match Topology::ALL.iter().find(|t| t.as_str() == s) {
            Some(t) => Ok(*t),
            None => config_err(format!("unknown topology '{s}'")),
        }
    }
}

fn default_dr() -> usize {
    32
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub backbone: Backbone,
    pub topology: Topology,
    #[serde(default = "default_dr")]
    pub dr_channels: usize,
    #[serde(default = "default_true")]
    pub use_scfb: bool,
    #[serde(default = "default_true")]
    pub use_scale_supervision: bool,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            backbone: Backbone::Tiny,
            topology: Topology::Mbttbf,
            dr_channels: 32,
            use_scfb: true,
            use_scale_supervision: true,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Maxpool,
    Relu,
    Sigmoid,
    Upsample,
}

/// One backbone layer. Convs are same-padded; `stride` is the op's own
/// stride (2 for the pools, 1 otherwise).
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

fn conv_l(ci: usize, co: usize, k: usize) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Conv,
        in_channels: ci,
        out_channels: co,
        kernel: k,
        stride: 1,
    }
}

fn relu_l(c: usize) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Relu,
        in_channels: c,
        out_channels: c,
        kernel: 0,
        stride: 1,
    }
}

fn pool_l() -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Maxpool,
        in_channels: 0,
        out_channels: 0,
        kernel: 2,
        stride: 2,
    }
}

/// The backbone as a flat layer list plus the indices of the four tap
/// layers; the output AFTER the listed layer is the tap. Taps sit at
/// strides 4, 8, 16, 32.
pub fn backbone_spec(backbone: Backbone) -> (Vec<LayerSpec>, [usize; 4]) {
    let (block_convs, block_ch, conv6): (&[usize], &[usize], (usize, usize)) = match backbone {
        Backbone::Vgg16Layout => (&[2, 2, 3, 3, 3], &[64, 128, 256, 512, 512], (512, 128)),
        Backbone::Tiny => (&[1, 1, 2, 2, 2], &[32, 32, 32, 64, 64], (64, 64)),
    };
    let mut layers = Vec::new();
    let mut taps = [0usize; 4];
    let mut tap_at = 0usize;
    let mut ci = 3usize;
    for (bi, (&n, &co)) in block_convs.iter().zip(block_ch).enumerate() {
        // Pools before blocks 2..5 place block 3's tap at stride 4.
        if bi >= 1 {
            layers.push(pool_l());
        }
        for _ in 0..n {
            layers.push(conv_l(ci, co, 3));
            layers.push(relu_l(co));
            ci = co;
        }
        if bi >= 2 {
            taps[tap_at] = layers.len() - 1;
            tap_at += 1;
        }
    }
    layers.push(pool_l());
    layers.push(conv_l(conv6.0, conv6.1, 1));
    layers.push(relu_l(conv6.1));
    taps[3] = layers.len() - 1;
    (layers, taps)
}

pub fn tap_channels(backbone: Backbone) -> [usize; 4] {
    match backbone {
        Backbone::Vgg16Layout => [256, 512, 512, 128],
        Backbone::Tiny => [32, 64, 64, 64],
    }
}

/// A feature map plus its stride relative to the (padded) input image.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub values: Tensor,
    pub stride: usize,
}

/// One supervised side output: `bands` are 0-based scale-band indices whose
/// summed ground truth supervises this grid.
#[derive(Debug, Clone)]
pub struct SideOutput {
    pub name: String,
    pub bands: Vec<usize>,
    pub grid: FeatureGrid,
    pub(crate) node: NodeId,
}

/// SCFB internals exposed for the structural equivalence checks.
#[derive(Debug, Clone)]
pub struct ScfbTrace {
    pub name: String,
    pub aligned_i: FeatureGrid,
    pub aligned_j: FeatureGrid,
    pub hat_i: FeatureGrid,
    pub hat_j: FeatureGrid,
}

#[derive(Debug)]
pub struct FusionState {
    pub input_hw: (usize, usize),
    /// Inputs are zero-padded bottom/right to multiples of 32 before the
    /// backbone; grids cover the padded extent.
    pub padded_hw: (usize, usize),
    /// Post-DR taps F3..F6 (raw backbone taps for topology NONE).
    pub taps: Vec<FeatureGrid>,
    /// Bottom-top maps in order 34, 45, 56[, 345, 456]; empty when unused.
    pub bt: Vec<(String, FeatureGrid)>,
    /// Top-bottom maps in order 65, 54, 43[, 654, 543]; empty when unused.
    pub tb: Vec<(String, FeatureGrid)>,
    /// Attention gates A, one channel per fused stream.
    pub attention: Option<FeatureGrid>,
    /// F_f = sum_k A^k (.) M_k.
    pub fused: Option<FeatureGrid>,
    pub prediction: FeatureGrid,
    pub side_outputs: Vec<SideOutput>,
    pub scfb_traces: Vec<ScfbTrace>,
    /// Mirrors the config flag: when false the side outputs exist but take
    /// no part in the loss.
    pub supervise_sides: bool,
    pub(crate) prediction_node: NodeId,
}

/// Forward result that keeps the tape alive for backward passes.
#[derive(Debug)]
pub struct TracedForward {
    pub tape: Tape,
    pub state: FusionState,
}

#[derive(Debug, Clone)]
struct Stream {
    node: NodeId,
    stride: usize,
    bands: Vec<usize>,
}

fn union_bands(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = a.iter().chain(b).copied().collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn snapshot(tape: &Tape, id: NodeId, stride: usize) -> FeatureGrid {
    FeatureGrid {
        values: tape.value(id).clone(),
        stride,
    }
}

/// Standard normal via Box-Muller on two uniform draws.
pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

struct ParamBank {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    rng: ChaCha8Rng,
}

impl ParamBank {
    /// He-normal weights, zero biases, registered as `{prefix}.w` / `{prefix}.b`.
    fn conv(&mut self, prefix: &str, ci: usize, co: usize, k: usize) {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        let w = Param {
            name: format!("{prefix}.w"),
            shape: if k == 1 {
                vec![co, ci]
            } else {
                vec![co, ci, k, k]
            },
            data: (0..co * ci * k * k)
                .map(|_| normal(&mut self.rng) * std)
                .collect(),
        };
        let b = Param {
            name: format!("{prefix}.b"),
            shape: vec![co],
            data: vec![0.0; co],
        };
        for p in [w, b] {
            let prev = self.index.insert(p.name.clone(), self.params.len());
            debug_assert!(prev.is_none(), "duplicate parameter {}", p.name);
            self.params.push(p);
        }
    }
}

const BT_L1: [&str; 3] = ["bt.l1.34", "bt.l1.45", "bt.l1.56"];
const BT_L2: [&str; 2] = ["bt.l2.345", "bt.l2.456"];
const TB_L1: [&str; 3] = ["tb.l1.65", "tb.l1.54", "tb.l1.43"];
const TB_L2: [&str; 2] = ["tb.l2.654", "tb.l2.543"];

#[derive(Debug)]
pub struct Network {
    pub config: NetworkConfig,
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Network> {
        if config.dr_channels == 0 {
            return config_err("dr_channels must be >= 1");
        }
        let mut bank = ParamBank {
            params: Vec::new(),
            index: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
        };
        let (layers, _) = backbone_spec(config.backbone);
        let mut conv_no = 0usize;
        for l in &layers {
            if l.kind == LayerKind::Conv {
                bank.conv(
                    &format!("backbone.conv{conv_no}"),
                    l.in_channels,
                    l.out_channels,
                    l.kernel,
                );
                conv_no += 1;
            }
        }
        let tap_ch = tap_channels(config.backbone);
        let dr = config.dr_channels;
        let t = config.topology;
        if t != Topology::None {
            for (i, &c) in tap_ch.iter().enumerate() {
                bank.conv(&format!("dr{}", i + 3), c, dr, 1);
            }
        }
        let mut blocks: Vec<&str> = Vec::new();
        match t {
            Topology::Bt => blocks.extend(BT_L1),
            Topology::Tb => blocks.extend(TB_L1),
            Topology::Bttb => {
                blocks.extend(BT_L1);
                blocks.extend(TB_L1);
            }
            Topology::Mbttbf => {
                blocks.extend(BT_L1);
                blocks.extend(BT_L2);
                blocks.extend(TB_L1);
                blocks.extend(TB_L2);
            }
            _ => {}
        }
        for block in blocks {
            if config.use_scfb {
                bank.conv(&format!("{block}.c1_i"), dr, dr, 3);
                bank.conv(&format!("{block}.c1_j"), dr, dr, 3);
                bank.conv(&format!("{block}.c2_i"), dr, dr, 3);
                bank.conv(&format!("{block}.c2_j"), dr, dr, 3);
                bank.conv(&format!("{block}.c3_i"), dr, 1, 1);
                bank.conv(&format!("{block}.c3_j"), dr, 1, 1);
            } else {
                bank.conv(&format!("{block}.fuse"), 2 * dr, dr, 3);
            }
        }
        match t {
            Topology::Bttb => {
                bank.conv("att.c1", 2 * dr, 16, 3);
                bank.conv("att.c2", 16, 2, 1);
            }
            Topology::Mbttbf => {
                bank.conv("att.c1", 4 * dr, 16, 3);
                bank.conv("att.c2", 16, 4, 1);
            }
            _ => {}
        }
        let pred_ci = match t {
            Topology::None => tap_ch[3],
            Topology::FlatConcat => 4 * dr,
            _ => dr,
        };
        bank.conv("predict", pred_ci, 1, 1);
        Ok(Network {
            config,
            params: bank.params,
            index: bank.index,
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn set_param(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let Some(&i) = self.index.get(name) else {
            return config_err(format!("no parameter named '{name}'"));
        };
        if self.params[i].data.len() != data.len() {
            return config_err(format!(
                "parameter '{name}' has {} values, got {}",
                self.params[i].data.len(),
                data.len()
            ));
        }
        self.params[i].data.copy_from_slice(data);
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    fn p(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not registered"))
    }

    fn conv_node(&self, tape: &mut Tape, x: NodeId, prefix: &str) -> NodeId {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        tape.conv(&self.params, x, w, b)
    }

    fn conv_relu(&self, tape: &mut Tape, x: NodeId, prefix: &str) -> NodeId {
        let c = self.conv_node(tape, x, prefix);
        tape.relu(c)
    }

    /// Align `src` from its stride onto `to`: bilinear upsampling when
    /// moving finer, average pooling when moving coarser.
    fn align(&self, tape: &mut Tape, src: NodeId, from: usize, to: usize) -> NodeId {
        if from == to {
            src
        } else if from < to {
            tape.avgpool(src, to / from)
        } else {
            tape.upsample(src, from / to)
        }
    }

    fn predict_node(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        self.conv_relu(tape, x, "predict")
    }

    /// One SCFB: the non-target stream `i` is resampled onto `j`'s stride
    /// first, then cross residuals, per-stream convs, side heads, and the
    /// additive merge all happen at the target stride.
    fn scfb_block(
        &self,
        tape: &mut Tape,
        state: &mut FusionState,
        name: &str,
        i: &Stream,
        j: &Stream,
    ) -> Stream {
        let ai = self.align(tape, i.node, i.stride, j.stride);
        let aj = j.node;
        let fused = if self.config.use_scfb {
            let ri = self.conv_relu(tape, ai, &format!("{name}.c1_i"));
            let rj = self.conv_relu(tape, aj, &format!("{name}.c1_j"));
            let hat_i = tape.add(&[ai, rj]);
            let hat_j = tape.add(&[aj, ri]);
            let g_i = self.conv_relu(tape, hat_i, &format!("{name}.c2_i"));
            let g_j = self.conv_relu(tape, hat_j, &format!("{name}.c2_j"));
            let s_i = self.conv_relu(tape, g_i, &format!("{name}.c3_i"));
            let s_j = self.conv_relu(tape, g_j, &format!("{name}.c3_j"));
            state.scfb_traces.push(ScfbTrace {
                name: name.to_string(),
                aligned_i: snapshot(tape, ai, j.stride),
                aligned_j: snapshot(tape, aj, j.stride),
                hat_i: snapshot(tape, hat_i, j.stride),
                hat_j: snapshot(tape, hat_j, j.stride),
            });
            state.side_outputs.push(SideOutput {
                name: format!("{name}.side_i"),
                bands: i.bands.clone(),
                grid: snapshot(tape, s_i, j.stride),
                node: s_i,
            });
            state.side_outputs.push(SideOutput {
                name: format!("{name}.side_j"),
                bands: j.bands.clone(),
                grid: snapshot(tape, s_j, j.stride),
                node: s_j,
            });
            tape.add(&[g_i, g_j])
        } else {
            let cat = tape.concat(&[ai, aj]);
            self.conv_relu(tape, cat, &format!("{name}.fuse"))
        };
        Stream {
            node: fused,
            stride: j.stride,
            bands: union_bands(&i.bands, &j.bands),
        }
    }

    /// One fusion direction over `chain[0] -> chain[3]`. Level 1 fuses
    /// adjacent raw taps; level 2 fuses the level-1 maps left to right.
    /// Returns streams in block order: three level-1, then two level-2.
    fn direction(
        &self,
        tape: &mut Tape,
        state: &mut FusionState,
        chain: &[Stream],
        prefix: &str,
        two_levels: bool,
    ) -> Vec<Stream> {
        let digits: [&str; 4] = if prefix == "bt" {
            ["3", "4", "5", "6"]
        } else {
            ["6", "5", "4", "3"]
        };
        let mut out = Vec::new();
        let mut grids = Vec::new();
        for k in 0..3 {
            let name = format!("{prefix}.l1.{}{}", digits[k], digits[k + 1]);
            let s = self.scfb_block(tape, state, &name, &chain[k], &chain[k + 1]);
            grids.push((
                format!("l1.{}{}", digits[k], digits[k + 1]),
                snapshot(tape, s.node, s.stride),
            ));
            out.push(s);
        }
        if two_levels {
            let a = out[0].clone();
            let b = out[1].clone();
            let c = out[2].clone();
            let name = format!("{prefix}.l2.{}{}{}", digits[0], digits[1], digits[2]);
            let first = self.scfb_block(tape, state, &name, &a, &b);
            let name2 = format!("{prefix}.l2.{}{}{}", digits[1], digits[2], digits[3]);
            let second = self.scfb_block(tape, state, &name2, &first, &c);
            grids.push((
                format!("l2.{}{}{}", digits[0], digits[1], digits[2]),
                snapshot(tape, first.node, first.stride),
            ));
            grids.push((
                format!("l2.{}{}{}", digits[1], digits[2], digits[3]),
                snapshot(tape, second.node, second.stride),
            ));
            out.push(first);
            out.push(second);
        }
        if prefix == "bt" {
            state.bt.extend(grids);
        } else {
            state.tb.extend(grids);
        }
        out
    }

    /// Attention head over fused streams already aligned to stride 4:
    /// concat -> 3x3 conv (16) -> ReLU -> 1x1 conv (one gate channel per
    /// stream) -> sigmoid -> channel-shared gated sum -> prediction.
    fn attention_head(&self, tape: &mut Tape, state: &mut FusionState, streams: &[NodeId]) {
        let cat = tape.concat(streams);
        let mid = self.conv_relu(tape, cat, "att.c1");
        let logits = self.conv_node(tape, mid, "att.c2");
        let gates = tape.sigmoid(logits);
        let fused = tape.attention(gates, streams);
        let pred = self.predict_node(tape, fused);
        state.attention = Some(snapshot(tape, gates, 4));
        state.fused = Some(snapshot(tape, fused, 4));
        state.prediction = snapshot(tape, pred, 4);
        state.prediction_node = pred;
    }

    pub fn forward(&self, image: &Tensor) -> Result<FusionState> {
        Ok(self.forward_traced(image)?.state)
    }

    pub fn forward_traced(&self, image: &Tensor) -> Result<TracedForward> {
        if image.c != 3 || image.h == 0 || image.w == 0 {
            return data_err(format!(
                "expected a 3xHxW image, got {}x{}x{}",
                image.c, image.h, image.w
            ));
        }
        let (h, w) = (image.h, image.w);
        let (ph, pw) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
        let padded = image.pad_to(ph, pw);

        let mut tape = Tape::new();
        let mut cur = tape.input(padded);
        let (layers, tap_idx) = backbone_spec(self.config.backbone);
        let mut raw_taps = Vec::with_capacity(4);
        let mut conv_no = 0usize;
        for (li, l) in layers.iter().enumerate() {
            cur = match l.kind {
                LayerKind::Conv => {
                    let id = self.conv_node(&mut tape, cur, &format!("backbone.conv{conv_no}"));
                    conv_no += 1;
                    id
                }
                LayerKind::Relu => tape.relu(cur),
                LayerKind::Maxpool => tape.maxpool2(cur),
                LayerKind::Sigmoid => tape.sigmoid(cur),
                LayerKind::Upsample => tape.upsample(cur, l.stride),
            };
            if tap_idx.contains(&li) {
                raw_taps.push(cur);
            }
        }
        debug_assert_eq!(raw_taps.len(), 4);
        let tap_strides = [4usize, 8, 16, 32];

        let mut state = FusionState {
            input_hw: (h, w),
            padded_hw: (ph, pw),
            taps: Vec::new(),
            bt: Vec::new(),
            tb: Vec::new(),
            attention: None,
            fused: None,
            prediction: FeatureGrid {
                values: Tensor::zeros(0, 0, 0),
                stride: 0,
            },
            side_outputs: Vec::new(),
            scfb_traces: Vec::new(),
            supervise_sides: self.config.use_scale_supervision,
            prediction_node: 0,
        };

        let topology = self.config.topology;
        if topology == Topology::None {
            for (k, &t) in raw_taps.iter().enumerate() {
                state.taps.push(snapshot(&tape, t, tap_strides[k]));
            }
            let pred = self.predict_node(&mut tape, raw_taps[3]);
            state.prediction = snapshot(&tape, pred, 32);
            state.prediction_node = pred;
            return Ok(TracedForward { tape, state });
        }

        let mut base = Vec::with_capacity(4);
        for (k, &t) in raw_taps.iter().enumerate() {
            let r = self.conv_relu(&mut tape, t, &format!("dr{}", k + 3));
            state.taps.push(snapshot(&tape, r, tap_strides[k]));
            base.push(Stream {
                node: r,
                stride: tap_strides[k],
                bands: vec![k],
            });
        }
        let rev: Vec<Stream> = base.iter().rev().cloned().collect();

        match topology {
            Topology::FlatAdd | Topology::FlatConcat => {
                let aligned: Vec<NodeId> = base
                    .iter()
                    .map(|s| self.align(&mut tape, s.node, s.stride, 4))
                    .collect();
                let merged = if topology == Topology::FlatAdd {
                    tape.add(&aligned)
                } else {
                    tape.concat(&aligned)
                };
                let pred = self.predict_node(&mut tape, merged);
                state.prediction = snapshot(&tape, pred, 4);
                state.prediction_node = pred;
            }
            Topology::Bt => {
                let bt = self.direction(&mut tape, &mut state, &base, "bt", false);
                let pred = self.predict_node(&mut tape, bt[2].node);
                state.prediction = snapshot(&tape, pred, bt[2].stride);
                state.prediction_node = pred;
            }
            Topology::Tb => {
                let tb = self.direction(&mut tape, &mut state, &rev, "tb", false);
                let pred = self.predict_node(&mut tape, tb[2].node);
                state.prediction = snapshot(&tape, pred, tb[2].stride);
                state.prediction_node = pred;
            }
            Topology::Bttb => {
                let bt = self.direction(&mut tape, &mut state, &base, "bt", false);
                let tb = self.direction(&mut tape, &mut state, &rev, "tb", false);
                let m1 = self.align(&mut tape, bt[2].node, bt[2].stride, 4);
                let m2 = tb[2].node;
                self.attention_head(&mut tape, &mut state, &[m1, m2]);
            }
            Topology::Mbttbf => {
                let bt = self.direction(&mut tape, &mut state, &base, "bt", true);
                let tb = self.direction(&mut tape, &mut state, &rev, "tb", true);
                let m1 = self.align(&mut tape, bt[2].node, bt[2].stride, 4);
                let m2 = self.align(&mut tape, bt[4].node, bt[4].stride, 4);
                let m3 = tb[2].node;
                let m4 = tb[4].node;
                self.attention_head(&mut tape, &mut state, &[m1, m2, m3, m4]);
            }
            Topology::None => unreachable!(),
        }
        Ok(TracedForward { tape, state })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::kernels;

    fn cfg(backbone: Backbone, topology: Topology) -> NetworkConfig {
        NetworkConfig {
            backbone,
            topology,
            rng_seed: 7,
            ..NetworkConfig::default()
        }
    }

    fn test_image(h: usize, w: usize) -> Tensor {
        let mut t = Tensor::zeros(3, h, w);
        for c in 0..3 {
            let p = t.plane_mut(c);
            for y in 0..h {
                for x in 0..w {
                    p[y * w + x] = ((x * 31 + y * 17 + c * 7) % 13) as f64 / 13.0;
                }
            }
        }
        t
    }

    #[test]
    fn config_serde_uses_contract_strings() {
        let c = NetworkConfig::default();
        let js = serde_json::to_string(&c).unwrap();
        assert!(js.contains("\"MBTTBF\""), "{js}");
        assert!(js.contains("\"tiny\""), "{js}");
        let parsed: NetworkConfig =
            serde_json::from_str(r#"{"backbone":"vgg16_layout","topology":"FLAT_ADD"}"#).unwrap();
        assert_eq!(parsed.backbone, Backbone::Vgg16Layout);
        assert_eq!(parsed.topology, Topology::FlatAdd);
        assert_eq!(parsed.dr_channels, 32);
        assert!(parsed.use_scfb);
        assert!(parsed.use_scale_supervision);
        assert_eq!(parsed.rng_seed, 0);
        assert!(serde_json::from_str::<NetworkConfig>(
            r#"{"backbone":"tiny","topology":"BT","bogus":1}"#
        )
        .is_err());
        assert_eq!("MBTTBF".parse::<Topology>().unwrap(), Topology::Mbttbf);
        assert!("mbttbf".parse::<Topology>().is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Network::new(cfg(Backbone::Tiny, Topology::Mbttbf)).unwrap();
        let b = Network::new(cfg(Backbone::Tiny, Topology::Mbttbf)).unwrap();
        assert_eq!(a.param_names(), b.param_names());
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.data, pb.data, "{}", pa.name);
        }
        let mut other = cfg(Backbone::Tiny, Topology::Mbttbf);
        other.rng_seed = 8;
        let c = Network::new(other).unwrap();
        assert!(a
            .params()
            .iter()
            .zip(c.params())
            .any(|(pa, pc)| pa.data != pc.data));
        assert_eq!(a.params()[0].name, "backbone.conv0.w");
        let names = a.param_names();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }

    #[test]
    fn param_inventory_per_topology() {
        // tiny backbone: 9 convs -> 18 tensors.
        let count = |t: Topology, scfb: bool| {
            let mut c = cfg(Backbone::Tiny, t);
            c.use_scfb = scfb;
            Network::new(c).unwrap().params().len()
        };
        assert_eq!(count(Topology::None, true), 20);
        assert_eq!(count(Topology::FlatAdd, true), 28);
        assert_eq!(count(Topology::FlatConcat, true), 28);
        assert_eq!(count(Topology::Bt, true), 18 + 8 + 3 * 12 + 2);
        assert_eq!(count(Topology::Tb, true), 18 + 8 + 3 * 12 + 2);
        assert_eq!(count(Topology::Bttb, true), 18 + 8 + 6 * 12 + 4 + 2);
        assert_eq!(count(Topology::Mbttbf, true), 18 + 8 + 10 * 12 + 4 + 2);
        assert_eq!(count(Topology::Mbttbf, false), 18 + 8 + 10 * 2 + 4 + 2);

        let net = Network::new(cfg(Backbone::Tiny, Topology::Mbttbf)).unwrap();
        assert_eq!(net.param("att.c1.w").unwrap().shape, vec![16, 128, 3, 3]);
        assert_eq!(net.param("att.c2.w").unwrap().shape, vec![4, 16]);
        assert_eq!(net.param("tb.l2.543.c3_j.w").unwrap().shape, vec![1, 32]);
        assert_eq!(net.param("predict.w").unwrap().shape, vec![1, 32]);
        let flat = Network::new(cfg(Backbone::Tiny, Topology::FlatConcat)).unwrap();
        assert_eq!(flat.param("predict.w").unwrap().shape, vec![1, 128]);
        let none = Network::new(cfg(Backbone::Tiny, Topology::None)).unwrap();
        assert_eq!(none.param("predict.w").unwrap().shape, vec![1, 64]);
        assert!(none.param("dr3.w").is_none());
    }

    #[test]
    fn forward_grids_match_topology_contracts() {
        let img = test_image(37, 45);
        for t in Topology::ALL {
            let net = Network::new(cfg(Backbone::Tiny, t)).unwrap();
            let state = net.forward(&img).unwrap();
            assert_eq!(state.input_hw, (37, 45));
            assert_eq!(state.padded_hw, (64, 64));
            assert_eq!(state.taps.len(), 4);
            for (k, tap) in state.taps.iter().enumerate() {
                let s = [4, 8, 16, 32][k];
                assert_eq!(tap.stride, s);
                assert_eq!((tap.values.h, tap.values.w), (64 / s, 64 / s));
                let want_c = if t == Topology::None {
                    tap_channels(Backbone::Tiny)[k]
                } else {
                    32
                };
                assert_eq!(tap.values.c, want_c, "{t:?} tap {k}");
            }
            let (n_sides, pred_stride) = match t {
                Topology::None => (0, 32),
                Topology::FlatAdd | Topology::FlatConcat => (0, 4),
                Topology::Bt => (6, 32),
                Topology::Tb => (6, 4),
                Topology::Bttb => (12, 4),
                Topology::Mbttbf => (20, 4),
            };
            assert_eq!(state.side_outputs.len(), n_sides, "{t:?}");
            assert_eq!(state.prediction.stride, pred_stride, "{t:?}");
            let p = &state.prediction.values;
            assert_eq!((p.c, p.h, p.w), (1, 64 / pred_stride, 64 / pred_stride));
            assert!(p.data.iter().all(|v| v.is_finite() && *v >= 0.0));
            match t {
                Topology::Bttb => {
                    let a = state.attention.as_ref().unwrap();
                    assert_eq!(a.values.c, 2);
                    assert!(a.values.data.iter().all(|v| *v > 0.0 && *v < 1.0));
                }
                Topology::Mbttbf => {
                    let a = state.attention.as_ref().unwrap();
                    assert_eq!(a.values.c, 4);
                    assert_eq!((a.values.h, a.values.w), (16, 16));
                    assert!(state.fused.is_some());
                }
                _ => assert!(state.attention.is_none() && state.fused.is_none()),
            }
        }
    }

    #[test]
    fn vgg_layout_forward_shapes() {
        let net = Network::new(cfg(Backbone::Vgg16Layout, Topology::None)).unwrap();
        let state = net.forward(&test_image(64, 64)).unwrap();
        let chans: Vec<usize> = state.taps.iter().map(|t| t.values.c).collect();
        assert_eq!(chans, [256, 512, 512, 128]);
        assert_eq!(state.prediction.values.h, 2);
    }

    #[test]
    fn mbttbf_side_bands_and_stream_names() {
        let net = Network::new(cfg(Backbone::Tiny, Topology::Mbttbf)).unwrap();
        let state = net.forward(&test_image(64, 64)).unwrap();
        let bt_names: Vec<&str> = state.bt.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(bt_names, ["l1.34", "l1.45", "l1.56", "l2.345", "l2.456"]);
        let tb_names: Vec<&str> = state.tb.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(tb_names, ["l1.65", "l1.54", "l1.43", "l2.654", "l2.543"]);
        let side = |name: &str| {
            state
                .side_outputs
                .iter()
                .find(|s| s.name == name)
                .unwrap_or_else(|| panic!("missing side {name}"))
        };
        assert_eq!(side("bt.l1.34.side_i").bands, [0]);
        assert_eq!(side("bt.l1.34.side_j").bands, [1]);
        assert_eq!(side("bt.l1.34.side_i").grid.stride, 8);
        assert_eq!(side("bt.l1.56.side_j").grid.stride, 32);
        assert_eq!(side("bt.l2.345.side_i").bands, [0, 1]);
        assert_eq!(side("bt.l2.345.side_j").bands, [1, 2]);
        assert_eq!(side("bt.l2.456.side_i").bands, [0, 1, 2]);
        assert_eq!(side("bt.l2.456.side_j").bands, [2, 3]);
        assert_eq!(side("tb.l1.65.side_i").bands, [3]);
        assert_eq!(side("tb.l1.65.side_j").bands, [2]);
        assert_eq!(side("tb.l2.654.side_i").bands, [2, 3]);
        assert_eq!(side("tb.l2.654.side_j").bands, [1, 2]);
        assert_eq!(side("tb.l2.543.side_i").bands, [1, 2, 3]);
        assert_eq!(side("tb.l2.543.side_j").bands, [0, 1]);
        assert_eq!(side("tb.l2.543.side_j").grid.stride, 4);
        for s in &state.side_outputs {
            assert_eq!(s.grid.values.c, 1);
            assert!(s
                .grid
                .values
                .data
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0));
        }
        assert_eq!(state.scfb_traces.len(), 10);
    }

    #[test]
    fn zeroed_c1_makes_hats_pass_through() {
        let mut net = Network::new(cfg(Backbone::Tiny, Topology::Mbttbf)).unwrap();
        let c1_names: Vec<String> = net
            .param_names()
            .into_iter()
            .filter(|n| n.contains(".c1_"))
            .collect();
        assert_eq!(c1_names.len(), 40);
        for name in c1_names {
            let len = net.param(&name).unwrap().data.len();
            net.set_param(&name, &vec![0.0; len]).unwrap();
        }
        let state = net.forward(&test_image(48, 32)).unwrap();
        assert!(!state.scfb_traces.is_empty());
        for tr in &state.scfb_traces {
            assert_eq!(tr.hat_i.values.data, tr.aligned_i.values.data, "{}", tr.name);
            assert_eq!(tr.hat_j.values.data, tr.aligned_j.values.data, "{}", tr.name);
        }
    }

    #[test]
    fn zeroed_attention_head_blends_streams_equally() {
        let mut net = Network::new(cfg(Backbone::Tiny, Topology::Mbttbf)).unwrap();
        for name in ["att.c1.w", "att.c1.b", "att.c2.w", "att.c2.b"] {
            let len = net.param(name).unwrap().data.len();
            net.set_param(name, &vec![0.0; len]).unwrap();
        }
        let state = net.forward(&test_image(32, 32)).unwrap();
        let a = state.attention.as_ref().unwrap();
        assert!(a.values.data.iter().all(|v| *v == 0.5));
        let find = |name: &str| {
            state
                .bt
                .iter()
                .chain(state.tb.iter())
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .values
                .clone()
        };
        let m1 = kernels::upsample_bilinear(&find("l1.56"), 8);
        let m2 = kernels::upsample_bilinear(&find("l2.456"), 8);
        let m3 = find("l1.43");
        let m4 = find("l2.543");
        let fused = &state.fused.as_ref().unwrap().values;
        assert_eq!(fused.c, 32);
        for ch in 0..fused.c {
            for (idx, v) in fused.plane(ch).iter().enumerate() {
                let want = 0.5
                    * (m1.plane(ch)[idx] + m2.plane(ch)[idx] + m3.plane(ch)[idx]
                        + m4.plane(ch)[idx]);
                assert!((v - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn none_topology_matches_manual_composition() {
        let net = Network::new(cfg(Backbone::Tiny, Topology::None)).unwrap();
        let img = test_image(64, 64);
        let state = net.forward(&img).unwrap();

        let w = |n: &str| net.param(n).unwrap().data.clone();
        let co = |n: &str| net.param(n).unwrap().shape[0];
        let c3 = |x: &Tensor, n: usize| {
            let t = kernels::conv3x3(
                x,
                &w(&format!("backbone.conv{n}.w")),
                &w(&format!("backbone.conv{n}.b")),
                co(&format!("backbone.conv{n}.w")),
            );
            kernels::relu(&t)
        };
        let pool = |x: &Tensor| kernels::maxpool2(x).0;

        let b1 = c3(&img, 0);
        let b2 = c3(&pool(&b1), 1);
        let p2 = pool(&b2);
        let b3 = c3(&c3(&p2, 2), 3);
        let p3 = pool(&b3);
        let b4 = c3(&c3(&p3, 4), 5);
        let p4 = pool(&b4);
        let b5 = c3(&c3(&p4, 6), 7);
        let p5 = pool(&b5);
        let c6 = kernels::relu(&kernels::conv1x1(
            &p5,
            &w("backbone.conv8.w"),
            &w("backbone.conv8.b"),
            64,
        ));
        let pred = kernels::relu(&kernels::conv1x1(&c6, &w("predict.w"), &w("predict.b"), 1));

        assert_eq!(state.taps[0].values.data, b3.data);
        assert_eq!(state.taps[3].values.data, c6.data);
        assert_eq!(state.prediction.values.data, pred.data);
    }

    #[test]
    fn fuse_c_path_has_no_sides() {
        let mut c = cfg(Backbone::Tiny, Topology::Bt);
        c.use_scfb = false;
        let net = Network::new(c).unwrap();
        assert!(net.param("bt.l1.34.fuse.w").is_some());
        assert!(net.param("bt.l1.34.c1_i.w").is_none());
        let state = net.forward(&test_image(32, 32)).unwrap();
        assert!(state.side_outputs.is_empty());
        assert!(state.scfb_traces.is_empty());
        assert!(state
            .prediction
            .values
            .data
            .iter()
            .all(|v| v.is_finite()));
    }

    #[test]
    fn backward_reaches_every_parameter() {
        let mut net = Network::new(cfg(Backbone::Tiny, Topology::Mbttbf)).unwrap();
        // Positive averaging weights keep every ReLU active and the gate
        // sigmoid unsaturated, so a dead unit can't mask a wiring bug.
        for name in net.param_names() {
            let p = net.param(&name).unwrap();
            let fan_in: usize = p.shape.iter().skip(1).product();
            let data: Vec<f64> = if name.ends_with(".w") {
                (0..p.data.len())
                    .map(|i| (1.0 + 0.1 * (i % 7) as f64 / 7.0) / fan_in as f64)
                    .collect()
            } else {
                vec![0.01; p.data.len()]
            };
            net.set_param(&name, &data).unwrap();
        }
        let traced = net.forward_traced(&test_image(32, 32)).unwrap();
        let mut seeds = Vec::new();
        let p = &traced.state.prediction.values;
        seeds.push((
            traced.state.prediction_node,
            Tensor {
                c: p.c,
                h: p.h,
                w: p.w,
                data: vec![1.0; p.data.len()],
            },
        ));
        for s in &traced.state.side_outputs {
            let g = &s.grid.values;
            seeds.push((
                s.node,
                Tensor {
                    c: g.c,
                    h: g.h,
                    w: g.w,
                    data: vec![1.0; g.data.len()],
                },
            ));
        }
        let grads = traced.tape.backward(net.params(), seeds);
        assert_eq!(grads.len(), net.params().len());
        for (p, g) in net.params().iter().zip(&grads) {
            assert_eq!(p.data.len(), g.len(), "{}", p.name);
            assert!(g.iter().all(|v| v.is_finite()), "{}", p.name);
            assert!(
                g.iter().any(|v| *v != 0.0),
                "parameter {} got no gradient",
                p.name
            );
        }
    }
}
