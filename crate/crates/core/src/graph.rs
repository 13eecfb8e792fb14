//! Declarative graph config, the model builder with attention insertion, and
//! parameter/MAC accounting.
//!
//! # Config format
//!
//! Line-oriented text with a header and a node section (`#` starts a
//! comment):
//!
//! ```text
//! ecoweednet-graph v1
//! resolution 640
//! classes 12
//! spab 1,3
//! simam 8,11,15
//! nodes
//! 0 conv from=-1 c=16 k=3 s=2
//! ...
//! 23 detect from=16,19,22
//! ```
//!
//! `from=-1` is the previous node's output (the image for node 0); other ids
//! are absolute node indices and must point backwards. Attention indices in
//! the header insert a SPAB/SimAM module on the named node's *output*: node
//! indexing of the base graph is unchanged, every consumer of that output
//! sees the refined map instead. Indices count nodes in config order from 0.
//!
//! # Accounting conventions
//!
//! Parameters are counted over learnable tensors only (batch-norm running
//! statistics are buffers, not parameters). MACs count convolution/linear
//! kernels and attention matrix products only; elementwise work, pooling and
//! SimAM statistics are excluded, so inserting SimAM changes neither count.
//! Reported GFLOPs are `2 * MACs / 1e9`.

use std::collections::BTreeSet;

use crate::attention::{SimAmConfig, SpabLayer};
use crate::blocks::{
    count_params, C2psaBlock, C3k2Block, ConvBnAct, DetectHead, DetectOut, SppfBlock,
};
use crate::detection::DEFAULT_REG_MAX;
use crate::error::{Error, Result};
use crate::rng::{streams, StreamRng};
use crate::tensor::tape::{ParamTrace, Tape, ValueId};
use crate::tensor::{FeatureMap, Scalar};

pub const FORMAT_TAG: &str = "ecoweednet-graph v1";

/// Reference graph at 640x640 (12 classes), no attention inserted.
pub const REFERENCE_CONFIG_640: &str = include_str!("../configs/ecoweednet-640.cfg");
/// Reference graph with the best ablation row's attention indices.
pub const BEST_CONFIG_640: &str = include_str!("../configs/ecoweednet-640-best.cfg");
/// Reduced-width graph for 64x64 desk-scale runs.
pub const TOY_CONFIG_64: &str = include_str!("../configs/ecoweednet-toy-64.cfg");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Conv,
    C3k2,
    Sppf,
    C2psa,
    Spab,
    Simam,
    Upsample,
    Concat,
    Detect,
}

impl BlockKind {
    fn parse(s: &str) -> Option<BlockKind> {
        Some(match s {
            "conv" => BlockKind::Conv,
            "c3k2" => BlockKind::C3k2,
            "sppf" => BlockKind::Sppf,
            "c2psa" => BlockKind::C2psa,
            "spab" => BlockKind::Spab,
            "simam" => BlockKind::Simam,
            "upsample" => BlockKind::Upsample,
            "concat" => BlockKind::Concat,
            "detect" => BlockKind::Detect,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            BlockKind::Conv => "conv",
            BlockKind::C3k2 => "c3k2",
            BlockKind::Sppf => "sppf",
            BlockKind::C2psa => "c2psa",
            BlockKind::Spab => "spab",
            BlockKind::Simam => "simam",
            BlockKind::Upsample => "upsample",
            BlockKind::Concat => "concat",
            BlockKind::Detect => "detect",
        }
    }
}

/// One declarative layer: kind, inputs and shape knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub kind: BlockKind,
    /// -1 = previous node (image for node 0); >= 0 absolute node index.
    pub from: Vec<i64>,
    pub out_channels: Option<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub repeat: usize,
}

/// The full ordered graph plus attention insertion indices.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphConfig {
    pub resolution: usize,
    pub num_classes: usize,
    pub spab: BTreeSet<usize>,
    pub simam: BTreeSet<usize>,
    pub nodes: Vec<LayerNode>,
}

impl GraphConfig {
    pub fn parse(text: &str) -> Result<GraphConfig> {
        let mut resolution = None;
        let mut num_classes = None;
        let mut spab = BTreeSet::new();
        let mut simam = BTreeSet::new();
        let mut nodes = Vec::new();
        let mut saw_tag = false;
        let mut in_nodes = false;

        for (li, raw) in text.lines().enumerate() {
            let line_no = li + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            if line.trim().is_empty() {
                continue;
            }
            if !saw_tag {
                if line.trim() != FORMAT_TAG {
                    return Err(Error::Parse {
                        line: line_no,
                        column: 1,
                        message: format!("expected format tag '{FORMAT_TAG}'"),
                    });
                }
                saw_tag = true;
                continue;
            }
            if !in_nodes {
                let mut it = line.split_whitespace();
                let key = it.next().unwrap();
                let col = line.find(key).unwrap_or(0) + 1;
                match key {
                    "resolution" => {
                        resolution = Some(parse_value(it.next(), line_no, col, "resolution")?)
                    }
                    "classes" => {
                        num_classes = Some(parse_value(it.next(), line_no, col, "classes")?)
                    }
                    "spab" => spab = parse_index_set(it.next(), line_no, col)?,
                    "simam" => simam = parse_index_set(it.next(), line_no, col)?,
                    "nodes" => in_nodes = true,
                    other => {
                        return Err(Error::Parse {
                            line: line_no,
                            column: col,
                            message: format!("unknown header key '{other}'"),
                        })
                    }
                }
                continue;
            }
            nodes.push(parse_node_line(line, line_no, nodes.len())?);
        }

        let cfg = GraphConfig {
            resolution: resolution.ok_or_else(|| Error::Parse {
                line: 0,
                column: 0,
                message: "missing 'resolution' header".into(),
            })?,
            num_classes: num_classes.ok_or_else(|| Error::Parse {
                line: 0,
                column: 0,
                message: "missing 'classes' header".into(),
            })?,
            spab,
            simam,
            nodes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form (parse -> to_text -> parse is the identity).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(FORMAT_TAG);
        out.push('\n');
        out.push_str(&format!("resolution {}\n", self.resolution));
        out.push_str(&format!("classes {}\n", self.num_classes));
        out.push_str(&format!("spab {}\n", join_indices(&self.spab)));
        out.push_str(&format!("simam {}\n", join_indices(&self.simam)));
        out.push_str("nodes\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let from = n
                .from
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let mut line = format!("{i} {} from={from}", n.kind.name());
            match n.kind {
                BlockKind::Conv => {
                    line += &format!(
                        " c={} k={} s={}",
                        n.out_channels.unwrap_or(0),
                        n.kernel,
                        n.stride
                    )
                }
                BlockKind::C3k2 | BlockKind::C2psa => {
                    line += &format!(" c={} r={}", n.out_channels.unwrap_or(0), n.repeat)
                }
                BlockKind::Sppf => line += &format!(" c={}", n.out_channels.unwrap_or(0)),
                BlockKind::Upsample => line += &format!(" s={}", n.stride),
                _ => {}
            }
            line.push('\n');
            out.push_str(&line);
        }
        out
    }

    /// Same graph with different attention insertion indices.
    pub fn with_attention(&self, spab: &[usize], simam: &[usize]) -> GraphConfig {
        let mut cfg = self.clone();
        cfg.spab = spab.iter().copied().collect();
        cfg.simam = simam.iter().copied().collect();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Graph { node: 0, message: "graph has no nodes".into() });
        }
        if self.num_classes == 0 {
            return Err(Error::Graph { node: 0, message: "classes must be >= 1".into() });
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.from.is_empty() {
                return Err(Error::Graph { node: i, message: "node has no inputs".into() });
            }
            for &f in &n.from {
                if f < -1 || f >= i as i64 {
                    return Err(Error::Graph {
                        node: i,
                        message: format!("input reference {f} is not an earlier node"),
                    });
                }
                if f == -1 && i == 0 && n.from.len() > 1 {
                    return Err(Error::Graph {
                        node: i,
                        message: "node 0 may only consume the image".into(),
                    });
                }
            }
            let needs_channels = matches!(
                n.kind,
                BlockKind::Conv | BlockKind::C3k2 | BlockKind::Sppf | BlockKind::C2psa
            );
            if needs_channels && n.out_channels.is_none() {
                return Err(Error::Graph {
                    node: i,
                    message: format!("{} node requires c=<channels>", n.kind.name()),
                });
            }
            if matches!(n.kind, BlockKind::Detect) {
                if n.from.len() != 3 {
                    return Err(Error::Graph {
                        node: i,
                        message: format!("detect requires exactly 3 inputs, got {}", n.from.len()),
                    });
                }
                if i != self.nodes.len() - 1 {
                    return Err(Error::Graph {
                        node: i,
                        message: "detect must be the last node".into(),
                    });
                }
            }
        }
        if self.nodes.last().map(|n| n.kind) != Some(BlockKind::Detect) {
            return Err(Error::Graph {
                node: self.nodes.len() - 1,
                message: "graph must end in a detect node".into(),
            });
        }
        let last = self.nodes.len() - 1;
        for &i in self.spab.iter().chain(self.simam.iter()) {
            if i >= self.nodes.len() {
                return Err(Error::AttentionIndex { index: i, len: self.nodes.len() });
            }
            if i == last {
                return Err(Error::Graph {
                    node: i,
                    message: "attention cannot be inserted after the detect node".into(),
                });
            }
        }
        Ok(())
    }
}

fn join_indices(set: &BTreeSet<usize>) -> String {
    set.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_value(
    tok: Option<&str>,
    line: usize,
    column: usize,
    what: &str,
) -> Result<usize> {
    tok.ok_or_else(|| Error::Parse {
        line,
        column,
        message: format!("missing value for {what}"),
    })?
    .parse()
    .map_err(|_| Error::Parse {
        line,
        column,
        message: format!("invalid {what} value"),
    })
}

fn parse_index_set(tok: Option<&str>, line: usize, column: usize) -> Result<BTreeSet<usize>> {
    let Some(tok) = tok else { return Ok(BTreeSet::new()) };
    let mut out = BTreeSet::new();
    for part in tok.split(',').filter(|p| !p.is_empty()) {
        out.insert(part.parse().map_err(|_| Error::Parse {
            line,
            column,
            message: format!("invalid index '{part}'"),
        })?);
    }
    Ok(out)
}

fn parse_node_line(line: &str, line_no: usize, expected_idx: usize) -> Result<LayerNode> {
    let mut tokens = Vec::new();
    let mut offset = 0;
    for tok in line.split_whitespace() {
        let col = line[offset..].find(tok).unwrap() + offset + 1;
        offset = col - 1 + tok.len();
        tokens.push((tok, col));
    }
    if tokens.len() < 2 {
        return Err(Error::Parse {
            line: line_no,
            column: 1,
            message: "node line needs at least '<idx> <kind>'".into(),
        });
    }
    let (idx_tok, idx_col) = tokens[0];
    let idx: usize = idx_tok.parse().map_err(|_| Error::Parse {
        line: line_no,
        column: idx_col,
        message: format!("invalid node index '{idx_tok}'"),
    })?;
    if idx != expected_idx {
        return Err(Error::Parse {
            line: line_no,
            column: idx_col,
            message: format!("node index {idx} out of order, expected {expected_idx}"),
        });
    }
    let (kind_tok, kind_col) = tokens[1];
    let kind = BlockKind::parse(kind_tok).ok_or_else(|| Error::Parse {
        line: line_no,
        column: kind_col,
        message: format!("unknown block kind '{kind_tok}'"),
    })?;
    let mut node = LayerNode {
        kind,
        from: vec![-1],
        out_channels: None,
        kernel: 3,
        stride: if kind == BlockKind::Upsample { 2 } else { 1 },
        repeat: 1,
    };
    for &(tok, col) in &tokens[2..] {
        let (key, value) = tok.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            column: col,
            message: format!("expected key=value, got '{tok}'"),
        })?;
        let bad = |msg: String| Error::Parse { line: line_no, column: col, message: msg };
        match key {
            "from" => {
                node.from = value
                    .split(',')
                    .filter(|p| !p.is_empty())
                    .map(|p| p.parse::<i64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(format!("invalid from list '{value}'")))?;
            }
            "c" => {
                node.out_channels =
                    Some(value.parse().map_err(|_| bad(format!("invalid channels '{value}'")))?)
            }
            "k" => node.kernel = value.parse().map_err(|_| bad(format!("invalid kernel '{value}'")))?,
            "s" => node.stride = value.parse().map_err(|_| bad(format!("invalid stride '{value}'")))?,
            "r" => node.repeat = value.parse().map_err(|_| bad(format!("invalid repeat '{value}'")))?,
            other => return Err(bad(format!("unknown key '{other}'"))),
        }
    }
    Ok(node)
}

// ---------------------------------------------------------------------------
// Executable model
// ---------------------------------------------------------------------------

pub(crate) enum Layer<T: Scalar> {
    Conv(ConvBnAct<T>),
    C3k2(C3k2Block<T>),
    Sppf(SppfBlock<T>),
    C2psa(C2psaBlock<T>),
    Spab(SpabLayer<T>),
    Simam(SimAmConfig<T>),
    Upsample { factor: usize },
    Concat,
    Detect(DetectHead<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum InputRef {
    Image,
    Node(usize),
}

pub(crate) struct ExecNode<T: Scalar> {
    pub name: String,
    inputs: Vec<InputRef>,
    pub layer: Layer<T>,
    out_channels: usize,
    /// Downsample factor relative to the input image.
    stride_px: usize,
}

/// A built, executable detector graph. Immutable during forward passes;
/// training updates parameters between passes.
pub struct Model<T: Scalar> {
    pub config: GraphConfig,
    pub(crate) nodes: Vec<ExecNode<T>>,
    /// exec index of each base node's effective output (after any attention).
    base_output: Vec<usize>,
    pub num_classes: usize,
    pub reg_max: usize,
    pub strides: Vec<usize>,
}

/// Result of one recorded forward pass.
pub struct ForwardPass {
    pub image: ValueId,
    /// Per exec node output (None for the detect node).
    pub node_outputs: Vec<Option<ValueId>>,
    pub det: DetectOut,
    pub trace: ParamTrace,
}

/// Build the executable graph, inserting SPAB/SimAM at the config's indices.
pub fn build_model<T: Scalar>(config: &GraphConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = StreamRng::new(seed, streams::WEIGHTS);
    let mut nodes: Vec<ExecNode<T>> = Vec::new();
    let mut base_output: Vec<usize> = Vec::new();
    let mut strides = Vec::new();

    for (i, spec) in config.nodes.iter().enumerate() {
        // resolve inputs against base indexing (remapped through attention)
        let mut inputs = Vec::new();
        let mut in_meta = Vec::new(); // (channels, stride)
        for &f in &spec.from {
            if f == -1 && i == 0 {
                inputs.push(InputRef::Image);
                in_meta.push((3usize, 1usize));
            } else {
                let base = if f == -1 { i - 1 } else { f as usize };
                let exec = base_output[base];
                inputs.push(InputRef::Node(exec));
                in_meta.push((nodes[exec].out_channels, nodes[exec].stride_px));
            }
        }
        let (cin, stride_in) = in_meta[0];
        let graph_err = |message: String| Error::Graph { node: i, message };

        let (layer, out_channels, stride_px): (Layer<T>, usize, usize) = match spec.kind {
            BlockKind::Conv => {
                let cout = spec.out_channels.unwrap();
                (
                    Layer::Conv(ConvBnAct::new(
                        &format!("n{i}.conv"),
                        cin,
                        cout,
                        spec.kernel,
                        spec.stride,
                        &mut rng,
                    )),
                    cout,
                    stride_in * spec.stride,
                )
            }
            BlockKind::C3k2 => {
                let cout = spec.out_channels.unwrap();
                (
                    Layer::C3k2(C3k2Block::new(
                        &format!("n{i}.c3k2"),
                        cin,
                        cout,
                        spec.repeat,
                        &mut rng,
                    )),
                    cout,
                    stride_in,
                )
            }
            BlockKind::Sppf => {
                let cout = spec.out_channels.unwrap();
                (
                    Layer::Sppf(SppfBlock::new(&format!("n{i}.sppf"), cin, cout, &mut rng)),
                    cout,
                    stride_in,
                )
            }
            BlockKind::C2psa => {
                let cout = spec.out_channels.unwrap();
                (
                    Layer::C2psa(C2psaBlock::new(
                        &format!("n{i}.c2psa"),
                        cin,
                        cout,
                        spec.repeat,
                        &mut rng,
                    )),
                    cout,
                    stride_in,
                )
            }
            BlockKind::Spab => {
                if let Some(c) = spec.out_channels {
                    if c != cin {
                        return Err(graph_err(format!(
                            "spab is channel-preserving: c={c} vs input {cin}"
                        )));
                    }
                }
                (
                    Layer::Spab(SpabLayer::new(&format!("n{i}.spab"), cin, 3, &mut rng)),
                    cin,
                    stride_in,
                )
            }
            BlockKind::Simam => (Layer::Simam(SimAmConfig::default()), cin, stride_in),
            BlockKind::Upsample => {
                let f = spec.stride;
                if f == 0 || stride_in % f != 0 {
                    return Err(graph_err(format!(
                        "upsample factor {f} does not divide stride {stride_in}"
                    )));
                }
                (Layer::Upsample { factor: f }, cin, stride_in / f)
            }
            BlockKind::Concat => {
                let mut c = 0;
                for &(ci, si) in &in_meta {
                    if si != stride_in {
                        return Err(graph_err(format!(
                            "concat inputs at different strides: {si} vs {stride_in}"
                        )));
                    }
                    c += ci;
                }
                (Layer::Concat, c, stride_in)
            }
            BlockKind::Detect => {
                let got: Vec<usize> = in_meta.iter().map(|&(_, s)| s).collect();
                if got != [8, 16, 32] {
                    return Err(graph_err(format!(
                        "wrong stride chain into detect: expected [8, 16, 32], got {got:?}"
                    )));
                }
                let chans: Vec<usize> = in_meta.iter().map(|&(c, _)| c).collect();
                strides = got.clone();
                (
                    Layer::Detect(DetectHead::new(
                        &format!("n{i}.detect"),
                        &chans,
                        &got,
                        config.num_classes,
                        DEFAULT_REG_MAX,
                        &mut rng,
                    )),
                    0,
                    stride_in,
                )
            }
        };

        nodes.push(ExecNode {
            name: format!("n{i}.{}", spec.kind.name()),
            inputs,
            layer,
            out_channels,
            stride_px,
        });
        let mut effective = nodes.len() - 1;

        if config.spab.contains(&i) {
            let c = nodes[effective].out_channels;
            let s = nodes[effective].stride_px;
            nodes.push(ExecNode {
                name: format!("n{i}.spab"),
                inputs: vec![InputRef::Node(effective)],
                layer: Layer::Spab(SpabLayer::new(&format!("n{i}.spab"), c, 3, &mut rng)),
                out_channels: c,
                stride_px: s,
            });
            effective = nodes.len() - 1;
        }
        if config.simam.contains(&i) {
            let c = nodes[effective].out_channels;
            let s = nodes[effective].stride_px;
            nodes.push(ExecNode {
                name: format!("n{i}.simam"),
                inputs: vec![InputRef::Node(effective)],
                layer: Layer::Simam(SimAmConfig::default()),
                out_channels: c,
                stride_px: s,
            });
            effective = nodes.len() - 1;
        }
        base_output.push(effective);
    }

    Ok(Model {
        config: config.clone(),
        nodes,
        base_output,
        num_classes: config.num_classes,
        reg_max: DEFAULT_REG_MAX,
        strides,
    })
}

impl<T: Scalar> Model<T> {
    /// Exec index of a base node's effective output (after inserted attention).
    pub fn exec_of_base(&self, base: usize) -> Option<usize> {
        self.base_output.get(base).copied()
    }

    /// Base node feeding the stride-8 head; default saliency target.
    pub fn default_saliency_base(&self) -> usize {
        let detect = self.config.nodes.len() - 1;
        let f = self.config.nodes[detect].from[0];
        if f == -1 { detect - 1 } else { f as usize }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        image: &FeatureMap<T>,
        train: bool,
    ) -> Result<ForwardPass> {
        let [_, c, h, w] = image.shape();
        if c != 3 {
            return Err(Error::DimMismatch {
                axis: "channels",
                expected: 3,
                got: c,
                context: "model input image",
            });
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be a multiple of 32"
            )));
        }
        let image_id = tape.leaf(image.clone());
        let mut trace = ParamTrace::new();
        let mut outputs: Vec<Option<ValueId>> = Vec::with_capacity(self.nodes.len());
        let mut det = None;

        for node in &self.nodes {
            let input_ids: Vec<ValueId> = node
                .inputs
                .iter()
                .map(|r| match r {
                    InputRef::Image => image_id,
                    InputRef::Node(j) => outputs[*j].expect("inputs precede consumers"),
                })
                .collect();
            let x = input_ids[0];
            let out = match &node.layer {
                Layer::Conv(b) => Some(b.forward(tape, &mut trace, x, train)?),
                Layer::C3k2(b) => Some(b.forward(tape, &mut trace, x, train)?),
                Layer::Sppf(b) => Some(b.forward(tape, &mut trace, x, train)?),
                Layer::C2psa(b) => Some(b.forward(tape, &mut trace, x, train)?),
                Layer::Spab(b) => Some(b.forward(tape, &mut trace, x)?),
                Layer::Simam(cfg) => Some(tape.simam_refine(x, *cfg)?),
                Layer::Upsample { factor } => Some(tape.upsample_nearest(x, *factor)?),
                Layer::Concat => Some(tape.concat_channels(&input_ids)?),
                Layer::Detect(head) => {
                    det = Some(head.forward(tape, &mut trace, &input_ids, train)?);
                    None
                }
            };
            outputs.push(out);
        }

        Ok(ForwardPass {
            image: image_id,
            node_outputs: outputs,
            det: det.expect("validated graphs end in detect"),
            trace,
        })
    }

    /// Eval-mode forward + decode + per-class NMS for a batch.
    pub fn predict(
        &self,
        image: &FeatureMap<T>,
        conf_thr: f64,
        iou_thr: f64,
    ) -> Result<Vec<Vec<crate::detection::DetectionBox>>> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, image, false)?;
        let box_maps: Vec<&FeatureMap<T>> =
            pass.det.scales.iter().map(|&(b, _)| tape.value(b)).collect();
        let cls_maps: Vec<&FeatureMap<T>> =
            pass.det.scales.iter().map(|&(_, c)| tape.value(c)).collect();
        let raw = crate::detection::decode_detections(
            &box_maps,
            &cls_maps,
            &pass.det.strides,
            (image.height(), image.width()),
            conf_thr,
        );
        Ok(raw
            .into_iter()
            .map(|dets| crate::detection::nms(&dets, iou_thr, conf_thr))
            .collect())
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &FeatureMap<T>)) {
        for node in &self.nodes {
            match &node.layer {
                Layer::Conv(b) => b.visit_params(f),
                Layer::C3k2(b) => b.visit_params(f),
                Layer::Sppf(b) => b.visit_params(f),
                Layer::C2psa(b) => b.visit_params(f),
                Layer::Spab(b) => b.for_each_param(f),
                Layer::Detect(b) => b.visit_params(f),
                Layer::Simam(_) | Layer::Upsample { .. } | Layer::Concat => {}
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut FeatureMap<T>)) {
        for node in &mut self.nodes {
            match &mut node.layer {
                Layer::Conv(b) => b.visit_params_mut(f),
                Layer::C3k2(b) => b.visit_params_mut(f),
                Layer::Sppf(b) => b.visit_params_mut(f),
                Layer::C2psa(b) => b.visit_params_mut(f),
                Layer::Spab(b) => b.for_each_param_mut(f),
                Layer::Detect(b) => b.visit_params_mut(f),
                Layer::Simam(_) | Layer::Upsample { .. } | Layer::Concat => {}
            }
        }
    }

    pub fn visit_bns(&self, f: &mut dyn FnMut(&crate::blocks::BatchNorm2d<T>)) {
        for node in &self.nodes {
            match &node.layer {
                Layer::Conv(b) => b.visit_bns(f),
                Layer::C3k2(b) => b.visit_bns(f),
                Layer::Sppf(b) => b.visit_bns(f),
                Layer::C2psa(b) => b.visit_bns(f),
                Layer::Detect(b) => b.visit_bns(f),
                Layer::Spab(_) | Layer::Simam(_) | Layer::Upsample { .. } | Layer::Concat => {}
            }
        }
    }

    /// Batch-norm running statistics as named per-channel vectors.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(String, Vec<T>)) {
        self.visit_bns(&mut |bn| bn.visit_buffers(f));
    }

    /// Re-estimate every batch norm's running statistics from the given
    /// batches (plain average across them). Inference right after short
    /// training runs needs this; the slow EMA alone lags the weights.
    pub fn recalibrate_bn(&self, batches: &[FeatureMap<T>]) -> Result<()> {
        if batches.is_empty() {
            return Ok(());
        }
        self.visit_bns(&mut |bn| bn.reset_running());
        for images in batches {
            let mut tape = Tape::new();
            self.forward(&mut tape, images, true)?;
        }
        Ok(())
    }

    /// Overwrite every learnable tensor and running buffer from a name ->
    /// (shape, data) table. Every model tensor must be present.
    pub fn load_state(
        &mut self,
        tensors: &std::collections::HashMap<String, ([usize; 4], Vec<T>)>,
    ) -> Result<()> {
        let mut missing = Vec::new();
        self.visit_params_mut(&mut |name, p| match tensors.get(&name) {
            Some((shape, data)) if *shape == p.shape() => {
                p.data_mut().copy_from_slice(data);
            }
            Some((shape, _)) => missing.push(format!(
                "{name}: shape {:?} does not match model {:?}",
                shape,
                p.shape()
            )),
            None => missing.push(format!("{name}: missing")),
        });
        self.visit_bns(&mut |bn| {
            let (mname, vname) = bn.buffer_names();
            match (tensors.get(&mname), tensors.get(&vname)) {
                (Some((_, m)), Some((_, v)))
                    if m.len() == bn.gamma.numel() && v.len() == bn.gamma.numel() =>
                {
                    bn.set_buffers(m.clone(), v.clone());
                }
                _ => missing.push(format!("{mname}/{vname}: missing or wrong length")),
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "state restore failed: {}",
                missing.join("; ")
            )))
        }
    }

    pub fn param_count(&self) -> usize {
        count_params(|f| self.visit_params(f))
    }

    /// Per-layer and total parameters/MACs from symbolic shape propagation at
    /// the given square input resolution.
    pub fn summary(&self, resolution: usize) -> Result<AccountingReport> {
        if resolution % 32 != 0 {
            return Err(Error::InvalidArg(format!(
                "resolution {resolution} must be a multiple of 32"
            )));
        }
        let image_shape = [1usize, 3, resolution, resolution];
        let mut shapes: Vec<[usize; 4]> = Vec::with_capacity(self.nodes.len());
        let mut rows = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let in_shapes: Vec<[usize; 4]> = node
                .inputs
                .iter()
                .map(|r| match r {
                    InputRef::Image => image_shape,
                    InputRef::Node(j) => shapes[*j],
                })
                .collect();
            let s0 = in_shapes[0];
            let (out_shape, macs): ([usize; 4], u64) = match &node.layer {
                Layer::Conv(b) => (b.out_shape(s0), b.macs(s0)),
                Layer::C3k2(b) => (b.out_shape(s0), b.macs(s0)),
                Layer::Sppf(b) => (b.out_shape(s0), b.macs(s0)),
                Layer::C2psa(b) => (b.out_shape(s0), b.macs(s0)),
                Layer::Spab(b) => {
                    let m = b
                        .weights
                        .iter()
                        .map(|w| w.numel() as u64 * (s0[2] * s0[3]) as u64)
                        .sum();
                    (s0, m)
                }
                Layer::Simam(_) => (s0, 0),
                Layer::Upsample { factor } => {
                    ([s0[0], s0[1], s0[2] * factor, s0[3] * factor], 0)
                }
                Layer::Concat => {
                    let c = in_shapes.iter().map(|s| s[1]).sum();
                    ([s0[0], c, s0[2], s0[3]], 0)
                }
                Layer::Detect(head) => {
                    let m = head.macs(&in_shapes);
                    (
                        [
                            s0[0],
                            4 * self.reg_max + self.num_classes,
                            s0[2],
                            s0[3],
                        ],
                        m,
                    )
                }
            };
            let params = match &node.layer {
                Layer::Conv(b) => count_params(|f| b.visit_params(f)),
                Layer::C3k2(b) => count_params(|f| b.visit_params(f)),
                Layer::Sppf(b) => count_params(|f| b.visit_params(f)),
                Layer::C2psa(b) => count_params(|f| b.visit_params(f)),
                Layer::Spab(b) => b.param_count(),
                Layer::Detect(b) => count_params(|f| b.visit_params(f)),
                Layer::Simam(_) | Layer::Upsample { .. } | Layer::Concat => 0,
            };
            rows.push(LayerRow {
                name: node.name.clone(),
                kind: layer_kind_name(&node.layer).to_string(),
                out_shape,
                params,
                macs,
            });
            shapes.push(out_shape);
        }
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_macs = rows.iter().map(|r| r.macs).sum();
        Ok(AccountingReport { rows, total_params, total_macs, resolution })
    }
}

fn layer_kind_name<T: Scalar>(layer: &Layer<T>) -> &'static str {
    match layer {
        Layer::Conv(_) => "conv",
        Layer::C3k2(_) => "c3k2",
        Layer::Sppf(_) => "sppf",
        Layer::C2psa(_) => "c2psa",
        Layer::Spab(_) => "spab",
        Layer::Simam(_) => "simam",
        Layer::Upsample { .. } => "upsample",
        Layer::Concat => "concat",
        Layer::Detect(_) => "detect",
    }
}

#[derive(Clone, Debug)]
pub struct LayerRow {
    pub name: String,
    pub kind: String,
    pub out_shape: [usize; 4],
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct AccountingReport {
    pub rows: Vec<LayerRow>,
    pub total_params: usize,
    pub total_macs: u64,
    pub resolution: usize,
}

impl AccountingReport {
    pub fn gflops(&self) -> f64 {
        2.0 * self.total_macs as f64 / 1e9
    }

    /// Plain-text table ending in a totals row.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:<9} {:>20} {:>12} {:>14}\n",
            "layer", "kind", "output", "params", "macs"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:<9} {:>20} {:>12} {:>14}\n",
                r.name,
                r.kind,
                format!(
                    "{}x{}x{}x{}",
                    r.out_shape[0], r.out_shape[1], r.out_shape[2], r.out_shape[3]
                ),
                r.params,
                r.macs
            ));
        }
        out.push_str(&format!(
            "total: {} params, {} MACs, {:.3} GFLOPs at {res}x{res} (GFLOPs = 2 x MACs / 1e9)\n",
            self.total_params,
            self.total_macs,
            self.gflops(),
            res = self.resolution
        ));
        out
    }
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GridMetrics {
    pub params: usize,
    pub macs: u64,
    pub gflops: f64,
}

pub struct GridOutcome {
    pub spab: Vec<usize>,
    pub simam: Vec<usize>,
    pub outcome: Result<GridMetrics>,
}

/// Account every (spab, simam) row against the base graph. Invalid rows are
/// reported per row; the grid continues.
pub fn ablation_grid(
    base: &GraphConfig,
    rows: &[(Vec<usize>, Vec<usize>)],
) -> Vec<GridOutcome> {
    rows.iter()
        .map(|(spab, simam)| {
            let cfg = base.with_attention(spab, simam);
            let outcome = build_model::<f32>(&cfg, 0)
                .and_then(|m| m.summary(cfg.resolution))
                .map(|s| GridMetrics {
                    params: s.total_params,
                    macs: s.total_macs,
                    gflops: s.gflops(),
                });
            GridOutcome { spab: spab.clone(), simam: simam.clone(), outcome }
        })
        .collect()
}
