//! Skip-connection decoders as explicit node graphs.
//!
//! Nodes are `(row, col)` with row 0 the finest scale. The `(i, 0)` nodes
//! carry the fused encoder features; every other node concatenates its
//! resampled inputs and runs a convolution block.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, Graph, ParamStore, Var};
use crate::error::{contract, Result};
use crate::nn::{BatchNorm2d, Conv2d};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Topology {
    RoadSegV2,
    UnetPlusPlus,
    Unet3Plus,
}

impl Topology {
    pub const ALL: [Topology; 3] = [Topology::RoadSegV2, Topology::UnetPlusPlus, Topology::Unet3Plus];

    pub fn name(self) -> &'static str {
        match self {
            Topology::RoadSegV2 => "roadsegv2",
            Topology::UnetPlusPlus => "unetpp",
            Topology::Unet3Plus => "unet3p",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn block_kind(self) -> BlockKind {
        match self {
            Topology::RoadSegV2 => BlockKind::DepthwiseSeparable,
            _ => BlockKind::Basic,
        }
    }
}

/// Which columns of the pruned decoder receive inter-scale edges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InterScaleColumns {
    #[default]
    Final,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Node {
    pub row: usize,
    pub col: usize,
}

impl Node {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    SameScale,
    Upsample,
    Downsample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub src: Node,
    pub dst: Node,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderGraph {
    pub topology: Topology,
    pub levels: usize,
    pub channels: Vec<usize>,
    pub inter_scale: InterScaleColumns,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

fn edge(src: Node, dst: Node) -> Edge {
    let kind = match src.row.cmp(&dst.row) {
        core::cmp::Ordering::Equal => EdgeKind::SameScale,
        core::cmp::Ordering::Greater => EdgeKind::Upsample,
        core::cmp::Ordering::Less => EdgeKind::Downsample,
    };
    Edge { src, dst, kind }
}

pub fn build_topology(topology: Topology, levels: usize, channels: &[usize]) -> Result<DecoderGraph> {
    build_topology_with(topology, levels, channels, InterScaleColumns::Final)
}

pub fn build_topology_with(
    topology: Topology,
    levels: usize,
    channels: &[usize],
    inter_scale: InterScaleColumns,
) -> Result<DecoderGraph> {
    let k = levels;
    if k < 2 {
        return Err(contract!("a decoder needs at least 2 levels, got {}", k));
    }
    if channels.len() != k || channels.contains(&0) {
        return Err(contract!("channel schedule {:?} does not fit {} levels", channels, k));
    }
    let last = |i: usize| k - 1 - i;
    let mut nodes: Vec<Node> = (0..k).map(|i| Node::new(i, 0)).collect();
    let mut edges = Vec::new();
    match topology {
        Topology::UnetPlusPlus => {
            for i in 0..k {
                for j in 1..=last(i) {
                    let dst = Node::new(i, j);
                    nodes.push(dst);
                    edges.extend((0..j).map(|jj| edge(Node::new(i, jj), dst)));
                    edges.push(edge(Node::new(i + 1, j - 1), dst));
                }
            }
        }
        Topology::RoadSegV2 => {
            for i in 0..k {
                for j in 1..=last(i) {
                    let dst = Node::new(i, j);
                    nodes.push(dst);
                    let is_final = j == last(i);
                    let mut incoming = vec![edge(Node::new(i, j - 1), dst)];
                    if is_final {
                        incoming.extend((0..j - 1).map(|jj| edge(Node::new(i, jj), dst)));
                    }
                    incoming.push(edge(Node::new(i + 1, j - 1), dst));
                    if is_final || inter_scale == InterScaleColumns::All {
                        incoming.extend((0..i).map(|ii| edge(Node::new(ii, 0), dst)));
                        for ii in i + 2..k {
                            let col = if is_final { last(ii) } else { (j - 1).min(last(ii)) };
                            incoming.push(edge(Node::new(ii, col), dst));
                        }
                    }
                    let mut seen = Vec::new();
                    for e in incoming {
                        if !seen.contains(&e) {
                            seen.push(e);
                        }
                    }
                    edges.extend(seen);
                }
            }
        }
        Topology::Unet3Plus => {
            for i in (0..k - 1).rev() {
                let dst = Node::new(i, last(i));
                nodes.push(dst);
                for ii in 0..k {
                    let src = if ii <= i { Node::new(ii, 0) } else { Node::new(ii, last(ii)) };
                    edges.push(edge(src, dst));
                }
            }
        }
    }
    // Every edge runs from a lower to a higher column, so this order is topological.
    nodes.sort_by_key(|n| (n.col, n.row));
    Ok(DecoderGraph {
        topology,
        levels,
        channels: channels.to_vec(),
        inter_scale,
        nodes,
        edges,
    })
}

impl DecoderGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn is_input(&self, n: Node) -> bool {
        n.col == 0
    }

    /// Incoming edges of `n` in concatenation order.
    pub fn incoming(&self, n: Node) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.dst == n)
    }

    pub fn output_node(&self) -> Node {
        Node::new(0, self.levels - 1)
    }

    pub fn count(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    pub fn inter_scale_count(&self) -> usize {
        self.edges.len() - self.count(EdgeKind::SameScale)
    }

    /// Channel width of the scale used by the full-scale decoder's
    /// per-edge projections.
    pub fn cat_channels(&self) -> usize {
        self.channels[0]
    }

    pub fn node_channels(&self, n: Node) -> usize {
        match self.topology {
            Topology::Unet3Plus if !self.is_input(n) => self.levels * self.cat_channels(),
            _ => self.channels[n.row],
        }
    }

    /// Kahn's algorithm; `None` on a cycle.
    pub fn topological_order(&self) -> Option<Vec<Node>> {
        let mut indeg: BTreeMap<Node, usize> = self.nodes.iter().map(|&n| (n, 0)).collect();
        for e in &self.edges {
            *indeg.get_mut(&e.dst)? += 1;
        }
        let mut ready: Vec<Node> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(n) = ready.pop() {
            order.push(n);
            for e in self.edges.iter().filter(|e| e.src == n) {
                let d = indeg.get_mut(&e.dst)?;
                *d -= 1;
                if *d == 0 {
                    ready.push(e.dst);
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }

    /// Convolution blocks of a non-input node, in execution order.
    pub fn node_blocks(&self, n: Node) -> Vec<ConvBlockSpec> {
        if self.is_input(n) {
            return Vec::new();
        }
        let kind = self.topology.block_kind();
        match self.topology {
            Topology::Unet3Plus => {
                let cat = self.cat_channels();
                let mut blocks: Vec<ConvBlockSpec> = self
                    .incoming(n)
                    .map(|e| ConvBlockSpec::new(kind, self.node_channels(e.src), cat, 3))
                    .collect();
                let agg = self.levels * cat;
                blocks.push(ConvBlockSpec::new(kind, agg, agg, 3));
                blocks
            }
            _ => {
                let cin = self.incoming(n).map(|e| self.node_channels(e.src)).sum();
                vec![ConvBlockSpec::new(kind, cin, self.channels[n.row], 3)]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Basic,
    DepthwiseSeparable,
}

/// One convolution (with bias) followed by batchnorm and ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvBlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            kind,
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// Convolution parameters including biases.
    pub fn conv_params(&self) -> u64 {
        let (i, o, kk) = (self.in_channels as u64, self.out_channels as u64, (self.kernel * self.kernel) as u64);
        match self.kind {
            BlockKind::Basic => i * o * kk + o,
            BlockKind::DepthwiseSeparable => i * kk + i + i * o + o,
        }
    }

    /// Convolution plus batchnorm scale and shift.
    pub fn params(&self) -> u64 {
        self.conv_params() + 2 * self.out_channels as u64
    }

    /// Multiply-accumulates on an `h × w` map.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (i, o, kk) = (self.in_channels as u64, self.out_channels as u64, (self.kernel * self.kernel) as u64);
        let per_pixel = match self.kind {
            BlockKind::Basic => i * o * kk,
            BlockKind::DepthwiseSeparable => i * kk + i * o,
        };
        per_pixel * (h * w) as u64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub params: u64,
    /// Multiply-accumulate count.
    pub flops: u64,
}

impl core::ops::Add for CostReport {
    type Output = CostReport;

    fn add(self, o: CostReport) -> CostReport {
        CostReport {
            params: self.params + o.params,
            flops: self.flops + o.flops,
        }
    }
}

/// Analytic cost with level 0 at `height × width`, including the 1×1 head.
pub fn cost_report(graph: &DecoderGraph, height: usize, width: usize) -> CostReport {
    let mut total = CostReport::default();
    for &n in graph.nodes() {
        let (h, w) = (height >> n.row, width >> n.row);
        for b in graph.node_blocks(n) {
            total = total
                + CostReport {
                    params: b.params(),
                    flops: b.macs(h, w),
                };
        }
    }
    let c = graph.node_channels(graph.output_node()) as u64;
    total
        + CostReport {
            params: c + 1,
            flops: c * (height * width) as u64,
        }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub kind: BlockKind,
    pub depthwise: Option<Conv2d>,
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, spec: ConvBlockSpec) -> Self {
        let (i, o, k) = (spec.in_channels, spec.out_channels, spec.kernel);
        let (depthwise, conv) = match spec.kind {
            BlockKind::Basic => (None, Conv2d::new(store, rng, name, i, o, k, ConvSpec::same(k), true)),
            BlockKind::DepthwiseSeparable => {
                let dw = Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.dw"),
                    i,
                    i,
                    k,
                    ConvSpec::same(k).with_groups(i),
                    true,
                );
                let pw = Conv2d::new(store, rng, &format!("{name}.pw"), i, o, 1, ConvSpec::same(1), true);
                (Some(dw), pw)
            }
        };
        Self {
            kind: spec.kind,
            depthwise,
            conv,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), o),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let x = match &self.depthwise {
            Some(dw) => dw.forward(g, x)?,
            None => x,
        };
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.relu(y))
    }
}

/// Learnable decoder for a fixed graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub graph: DecoderGraph,
    blocks: BTreeMap<Node, Vec<ConvBlock>>,
    pub head: Conv2d,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, graph: DecoderGraph) -> Self {
        let mut blocks = BTreeMap::new();
        for &n in graph.nodes() {
            let specs = graph.node_blocks(n);
            if specs.is_empty() {
                continue;
            }
            let built = specs
                .into_iter()
                .enumerate()
                .map(|(b, spec)| ConvBlock::new(store, rng, &format!("{name}.x{}{}.b{b}", n.row, n.col), spec))
                .collect();
            blocks.insert(n, built);
        }
        let out_c = graph.node_channels(graph.output_node());
        let head = Conv2d::new(store, rng, &format!("{name}.head"), out_c, 1, 1, ConvSpec::same(1), true);
        Self { graph, blocks, head }
    }

    pub fn blocks(&self, n: Node) -> &[ConvBlock] {
        self.blocks.get(&n).map_or(&[], |b| b.as_slice())
    }

    fn check_inputs(&self, g: &Graph, fused: &[Var]) -> Result<()> {
        let k = self.graph.levels;
        if fused.len() != k {
            return Err(contract!("decoder expects {} fused maps, got {}", k, fused.len()));
        }
        let [n, _, h0, w0] = g.shape(fused[0]);
        let unit = 1usize << (k - 1);
        if h0 % unit != 0 || w0 % unit != 0 {
            return Err(contract!(
                "level-0 size {}x{} is not a multiple of {} for {} levels",
                w0,
                h0,
                unit,
                k
            ));
        }
        for (i, &f) in fused.iter().enumerate() {
            let want = [n, self.graph.channels[i], h0 >> i, w0 >> i];
            if g.shape(f) != want {
                return Err(contract!(
                    "level {} input {:?} is not dyadically related to level 0 (expected {:?})",
                    i,
                    g.shape(f),
                    want
                ));
            }
        }
        Ok(())
    }

    fn resample(g: &mut Graph, x: Var, e: &Edge) -> Result<Var> {
        match e.kind {
            EdgeKind::SameScale => Ok(x),
            EdgeKind::Upsample => g.upsample(x, 1 << (e.src.row - e.dst.row)),
            EdgeKind::Downsample => g.max_pool(x, 1 << (e.dst.row - e.src.row)),
        }
    }

    /// Head logits at level-0 resolution.
    pub fn forward_logits(&self, g: &mut Graph, fused: &[Var]) -> Result<Var> {
        self.check_inputs(g, fused)?;
        let mut values: BTreeMap<Node, Var> = BTreeMap::new();
        for (i, &f) in fused.iter().enumerate() {
            values.insert(Node::new(i, 0), f);
        }
        for &n in self.graph.nodes() {
            if self.graph.is_input(n) {
                continue;
            }
            let blocks = self.blocks(n);
            let mut parts = Vec::new();
            for (idx, e) in self.graph.incoming(n).enumerate() {
                let src = *values
                    .get(&e.src)
                    .ok_or_else(|| contract!("node {:?} evaluated before its input {:?}", n, e.src))?;
                let x = Self::resample(g, src, e)?;
                let x = match self.graph.topology {
                    Topology::Unet3Plus => blocks[idx].forward(g, x)?,
                    _ => x,
                };
                parts.push(x);
            }
            let x = if parts.len() == 1 { parts[0] } else { g.concat(&parts)? };
            let last = blocks.last().ok_or_else(|| contract!("node {:?} has no block", n))?;
            values.insert(n, last.forward(g, x)?);
        }
        let out = values[&self.graph.output_node()];
        self.head.forward(g, out)
    }

    /// Freespace probabilities at level-0 resolution.
    pub fn forward(&self, g: &mut Graph, fused: &[Var]) -> Result<Var> {
        let logits = self.forward_logits(g, fused)?;
        Ok(g.sigmoid(logits))
    }
}
