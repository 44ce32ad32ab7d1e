//! LSN wiring: backbone, feature linear span, resolution alignment and
//! subspace linear span, configured per variant `LSN_k`.
//!
//! Pyramid levels are numbered 1 (input resolution) to 5 (deepest). A
//! subspace group anchored at level `j` fuses the window of levels given by
//! [`window_offsets`], truncated at the pyramid ends, and runs at the finest
//! resolution among its members. Groups are built from deep to shallow; a
//! member deeper than the anchor contributes its own group output when one
//! exists, so the shallowest group spans every stage.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lsu::{self, LsuParams};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Dims, Graph, NodeId, ParamSet, Tensor, UpsampleMode};

pub const STAGE_COUNT: usize = 5;
pub const CONVS_PER_STAGE: usize = 2;
pub const BASE_WIDTHS: [usize; STAGE_COUNT] = [16, 32, 64, 128, 128];

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub convs: usize,
    pub width: usize,
    /// Max-pooled on entry (every stage but the first).
    pub pooled: bool,
}

/// How deep maps are brought to a shallower resolution before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignmentMode {
    /// One upsample-by-2 plus LSU per level crossed, each with a loss head.
    #[default]
    Supervised,
    /// Same units, no loss heads on them.
    Unsupervised,
    /// No alignment units: a single fixed bilinear upsample per crossing.
    Removed,
}

impl AlignmentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignmentMode::Supervised => "supervised",
            AlignmentMode::Unsupervised => "unsupervised",
            AlignmentMode::Removed => "removed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "supervised" => Some(AlignmentMode::Supervised),
            "unsupervised" => Some(AlignmentMode::Unsupervised),
            "removed" => Some(AlignmentMode::Removed),
            _ => None,
        }
    }
}

/// A map produced somewhere in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MapRef {
    /// Feature-span output of a backbone stage (1-based).
    Feature(usize),
    /// Output of the subspace group anchored at a level.
    Subspace(usize),
    /// Output of an alignment bridge (index into `NetworkSpec::alignment`).
    Aligned(usize),
}

/// Brings `source` from `from_level` to `to_level`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bridge {
    pub id: String,
    pub source: MapRef,
    pub from_level: usize,
    pub to_level: usize,
    /// Learned unit (upsample + LSU) or a parameter-free bilinear upsample.
    pub learned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceGroup {
    pub id: String,
    pub anchor: usize,
    /// Pyramid levels in the window, deep to shallow.
    pub members: Vec<usize>,
    /// Aligned inputs, one per member.
    pub inputs: Vec<MapRef>,
    pub level: usize,
}

/// Which training phase a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    FeatureSpan,
    Alignment,
    SubspaceSpan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VariantOptions {
    pub upsample: UpsampleMode,
    pub alignment: AlignmentMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Span window `k` of `LSN_k`.
    pub variant: usize,
    pub width_multiplier: f64,
    pub stages: Vec<StageSpec>,
    pub options: VariantOptions,
    pub alignment: Vec<Bridge>,
    pub subspace_span: Vec<SubspaceGroup>,
    pub supervision: Vec<MapRef>,
    pub final_output: MapRef,
}

/// Offsets (relative to the anchor) of the levels fused by one subspace group.
pub fn window_offsets(k: usize) -> &'static [isize] {
    match k {
        1 => &[],
        2 => &[0, 1],
        3 => &[-1, 0, 1],
        _ => &[-1, 0, 1, 2],
    }
}

pub fn build_variant(k: usize, width_multiplier: f64) -> Result<NetworkSpec> {
    build_variant_with(k, width_multiplier, VariantOptions::default())
}

pub fn build_variant_with(k: usize, width_multiplier: f64, options: VariantOptions) -> Result<NetworkSpec> {
    if !(1..=4).contains(&k) {
        return Err(Error::invalid("build_variant", format!("variant k must be in 1..=4, got {k}")));
    }
    if !(width_multiplier.is_finite() && width_multiplier > 0.0) {
        return Err(Error::invalid("build_variant", format!("width multiplier must be positive, got {width_multiplier}")));
    }
    let stages = BASE_WIDTHS
        .iter()
        .enumerate()
        .map(|(i, &w)| StageSpec {
            convs: CONVS_PER_STAGE,
            width: ((w as f64 * width_multiplier).round() as usize).max(1),
            pooled: i > 0,
        })
        .collect();

    let mut builder = Wiring {
        options,
        alignment: Vec::new(),
        aligned: HashMap::new(),
    };
    let mut groups: Vec<SubspaceGroup> = Vec::new();
    let mut has_group = [false; STAGE_COUNT + 1];
    for anchor in (1..=STAGE_COUNT).rev() {
        let mut members: Vec<usize> = window_offsets(k)
            .iter()
            .map(|&o| anchor as isize + o)
            .filter(|&l| l >= 1 && l <= STAGE_COUNT as isize)
            .map(|l| l as usize)
            .collect();
        if members.len() < 2 {
            continue;
        }
        members.sort_unstable_by(|a, b| b.cmp(a));
        let level = *members.last().unwrap();
        let inputs = members
            .iter()
            .map(|&m| {
                let source = if m > anchor && has_group[m] {
                    (MapRef::Subspace(m), group_level(&groups, m))
                } else {
                    (MapRef::Feature(m), m)
                };
                builder.align(source.0, source.1, level)
            })
            .collect();
        groups.push(SubspaceGroup {
            id: format!("sub{anchor}"),
            anchor,
            members,
            inputs,
            level,
        });
        has_group[anchor] = true;
    }

    let mut supervision: Vec<MapRef> = (1..=STAGE_COUNT).map(MapRef::Feature).collect();
    if options.alignment == AlignmentMode::Supervised {
        supervision.extend((0..builder.alignment.len()).map(MapRef::Aligned));
    }
    supervision.extend(groups.iter().map(|g| MapRef::Subspace(g.anchor)));
    let final_output = groups
        .last()
        .map(|g| MapRef::Subspace(g.anchor))
        .unwrap_or(MapRef::Feature(1));

    Ok(NetworkSpec {
        variant: k,
        width_multiplier,
        stages,
        options,
        alignment: builder.alignment,
        subspace_span: groups,
        supervision,
        final_output,
    })
}

fn group_level(groups: &[SubspaceGroup], anchor: usize) -> usize {
    groups
        .iter()
        .find(|g| g.anchor == anchor)
        .map(|g| g.level)
        .expect("group exists")
}

struct Wiring {
    options: VariantOptions,
    alignment: Vec<Bridge>,
    aligned: HashMap<(MapRef, usize), MapRef>,
}

impl Wiring {
    fn align(&mut self, source: MapRef, level: usize, target: usize) -> MapRef {
        if level == target {
            return source;
        }
        if let Some(&done) = self.aligned.get(&(source, target)) {
            return done;
        }
        let learned = self.options.alignment != AlignmentMode::Removed;
        // Learned alignment crosses one level at a time, reusing shallower steps.
        let (input, from_level) = if learned {
            (self.align(source, level, target + 1), target + 1)
        } else {
            (source, level)
        };
        let id = format!("align{target}_{}", map_name(source));
        self.alignment.push(Bridge {
            id,
            source: input,
            from_level,
            to_level: target,
            learned,
        });
        let out = MapRef::Aligned(self.alignment.len() - 1);
        self.aligned.insert((source, target), out);
        out
    }
}

fn map_name(m: MapRef) -> String {
    match m {
        MapRef::Feature(s) => format!("feat{s}"),
        MapRef::Subspace(a) => format!("sub{a}"),
        MapRef::Aligned(i) => format!("aligned{i}"),
    }
}

pub fn conv_weight_name(stage: usize, layer: usize) -> String {
    format!("conv{stage}_{layer}.weight")
}

pub fn conv_bias_name(stage: usize, layer: usize) -> String {
    format!("conv{stage}_{layer}.bias")
}

pub fn upsample_kernel_name(id: &str) -> String {
    format!("up.{id}.kernel")
}

impl fmt::Display for MapRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&map_name(*self))
    }
}

impl NetworkSpec {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Spatial divisor every input size must be a multiple of.
    pub fn divisor(&self) -> usize {
        1 << (self.stage_count() - 1)
    }

    pub fn level_of(&self, m: MapRef) -> usize {
        match m {
            MapRef::Feature(s) => s,
            MapRef::Subspace(a) => group_level(&self.subspace_span, a),
            MapRef::Aligned(i) => self.alignment[i].to_level,
        }
    }

    /// Backbone stage a map is attributed to in span analyses.
    pub fn stage_of(&self, m: MapRef) -> usize {
        match m {
            MapRef::Feature(s) => s,
            MapRef::Subspace(a) => a,
            MapRef::Aligned(i) => self.stage_of(self.alignment[i].source),
        }
    }

    /// Human-readable name of a map; alignment maps use their bridge id.
    pub fn map_label(&self, m: MapRef) -> String {
        match m {
            MapRef::Aligned(i) => self.alignment[i].id.clone(),
            other => map_name(other),
        }
    }

    pub fn lsu_id(&self, m: MapRef) -> String {
        self.map_label(m)
    }

    /// Name, shape and training group of every parameter.
    pub fn param_shapes(&self) -> Vec<(String, Dims, ParamGroup)> {
        let mut out = Vec::new();
        let mut in_ch = 1;
        for (si, stage) in self.stages.iter().enumerate() {
            for l in 1..=stage.convs {
                out.push((conv_weight_name(si + 1, l), [stage.width, in_ch, 3, 3], ParamGroup::Backbone));
                out.push((conv_bias_name(si + 1, l), [stage.width, 1, 1, 1], ParamGroup::Backbone));
                in_ch = stage.width;
            }
        }
        let push_lsu = |out: &mut Vec<_>, id: &str, c: usize, group| {
            out.push((lsu::lambda_name(id), [1, c, 1, 1], group));
            out.push((lsu::bias_name(id), [1, 1, 1, 1], group));
        };
        for (si, stage) in self.stages.iter().enumerate() {
            push_lsu(&mut out, &map_name(MapRef::Feature(si + 1)), stage.width, ParamGroup::FeatureSpan);
        }
        for b in self.alignment.iter().filter(|b| b.learned) {
            if self.options.upsample == UpsampleMode::LearnedTransposed {
                out.push((upsample_kernel_name(&b.id), [1, 1, 4, 4], ParamGroup::Alignment));
            }
            push_lsu(&mut out, &b.id, 1, ParamGroup::Alignment);
        }
        for g in &self.subspace_span {
            push_lsu(&mut out, &g.id, g.inputs.len(), ParamGroup::SubspaceSpan);
        }
        out
    }

    pub fn param_group(&self, name: &str) -> Option<ParamGroup> {
        self.param_shapes()
            .into_iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, g)| g)
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, d, _)| d.iter().product::<usize>())
            .sum()
    }

    /// Fresh parameters: He-normal backbone kernels, small uniform LSU
    /// weights, zero biases and bilinear upsampling kernels.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, dims, group) in self.param_shapes() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(dims)
            } else if name.starts_with("up.") {
                kernels::bilinear_kernel(1, 2)
            } else if group == ParamGroup::Backbone {
                let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
                let std = (2.0 / fan_in).sqrt();
                Tensor::from_fn(dims, |_, _, _, _| T::from_f64_lossy(std * standard_normal(&mut rng)))
            } else {
                let input_sizes = vec![dims[1]];
                LsuParams::<T>::init(input_sizes, vec![dims[0]], &mut rng)
                    .expect("valid lsu shape")
                    .lambda
            };
            params.insert(name, t);
        }
        params
    }

    /// Key/value lines describing the variant.
    pub fn to_config_text(&self) -> String {
        format!(
            "variant=lsn{}\nwidth_multiplier={}\nstages={}\nalignment={}\nupsample={}\n",
            self.variant,
            self.width_multiplier,
            self.stage_count(),
            self.options.alignment.as_str(),
            upsample_name(self.options.upsample),
        )
    }

    pub fn from_config_text(text: &str) -> Result<NetworkSpec> {
        let (mut k, mut wm, mut stages) = (None, None, STAGE_COUNT);
        let mut options = VariantOptions::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::invalid("network config", format!("line {}: {msg}", i + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value".into()))?;
            match key.trim() {
                "variant" => k = Some(parse_variant(value.trim()).ok_or_else(|| bad(format!("bad variant `{value}`")))?),
                "width_multiplier" => wm = Some(value.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?),
                "stages" => stages = value.trim().parse::<usize>().map_err(|e| bad(e.to_string()))?,
                "alignment" => {
                    options.alignment =
                        AlignmentMode::parse(value.trim()).ok_or_else(|| bad(format!("bad alignment `{value}`")))?
                }
                "upsample" => {
                    options.upsample = parse_upsample(value.trim()).ok_or_else(|| bad(format!("bad upsample `{value}`")))?
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        if stages != STAGE_COUNT {
            return Err(Error::invalid("network config", format!("stages must be {STAGE_COUNT}, got {stages}")));
        }
        build_variant_with(k.unwrap_or(3), wm.unwrap_or(1.0), options)
    }
}

pub fn upsample_name(m: UpsampleMode) -> &'static str {
    match m {
        UpsampleMode::FixedBilinear => "bilinear",
        UpsampleMode::LearnedTransposed => "learned",
    }
}

pub fn parse_upsample(s: &str) -> Option<UpsampleMode> {
    match s {
        "bilinear" => Some(UpsampleMode::FixedBilinear),
        "learned" => Some(UpsampleMode::LearnedTransposed),
        _ => None,
    }
}

/// Parses `lsn3` or `3`.
pub fn parse_variant(s: &str) -> Option<usize> {
    let digits = s.strip_prefix("lsn").unwrap_or(s);
    digits.parse::<usize>().ok().filter(|k| (1..=4).contains(k))
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; the sine branch is discarded to keep draws independent of pairing.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One supervised prediction at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput<T> {
    pub map: MapRef,
    pub name: String,
    pub stage: usize,
    /// Pre-sigmoid scores.
    pub logits: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SideOutputs<T> {
    pub heads: Vec<HeadOutput<T>>,
    pub final_index: usize,
}

impl<T: Scalar> SideOutputs<T> {
    pub fn final_logits(&self) -> &Tensor<T> {
        &self.heads[self.final_index].logits
    }
}

/// Graph nodes of a recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// `(map, logits node at image resolution)` per supervision point.
    pub heads: Vec<(MapRef, NodeId)>,
    pub final_index: usize,
    /// Native-resolution node of every map.
    pub maps: HashMap<MapRef, NodeId>,
}

pub fn check_input_dims(spec: &NetworkSpec, dims: Dims) -> Result<()> {
    let d = spec.divisor();
    let [_, c, h, w] = dims;
    if c != 1 {
        return Err(Error::invalid("forward", format!("expected a single-channel image, got {c} channels")));
    }
    if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
        return Err(Error::invalid(
            "forward",
            format!("image size {h}x{w} must be a non-zero multiple of {d} in both dimensions"),
        ));
    }
    Ok(())
}

/// Records the full network on `image` into `graph`.
pub fn record_forward<T: Scalar>(spec: &NetworkSpec, graph: &mut Graph<T>, image: NodeId) -> Result<ForwardNodes> {
    check_input_dims(spec, graph.value(image).dims())?;
    let mut maps = HashMap::new();
    let mut x = image;
    for (si, stage) in spec.stages.iter().enumerate() {
        if stage.pooled {
            x = graph.maxpool2(x)?;
        }
        for l in 1..=stage.convs {
            let w = graph.param(&conv_weight_name(si + 1, l))?;
            let b = graph.param(&conv_bias_name(si + 1, l))?;
            let y = graph.conv2d(x, w, b, 1, 1)?;
            x = graph.relu(y)?;
        }
        let m = MapRef::Feature(si + 1);
        let s = lsu::lsu_node(graph, &spec.lsu_id(m), &[x], &[1])?;
        maps.insert(m, s[0]);
    }

    let mut bridge_nodes = Vec::with_capacity(spec.alignment.len());
    let mut group_iter = spec.subspace_span.iter().peekable();
    // Bridges and groups interleave: a bridge may consume a group output.
    let mut pending: Vec<usize> = (0..spec.alignment.len()).collect();
    loop {
        let mut progressed = false;
        while let Some(&i) = pending.first() {
            let bridge = &spec.alignment[i];
            let Some(&src) = maps.get(&bridge.source) else { break };
            let factor = 1 << (bridge.from_level - bridge.to_level);
            let node = if bridge.learned {
                let up = match spec.options.upsample {
                    UpsampleMode::LearnedTransposed => {
                        let k = graph.param(&upsample_kernel_name(&bridge.id))?;
                        graph.upsample_learned(src, k, factor)?
                    }
                    UpsampleMode::FixedBilinear => graph.upsample_bilinear(src, factor)?,
                };
                lsu::lsu_node(graph, &bridge.id, &[up], &[1])?[0]
            } else {
                graph.upsample_bilinear(src, factor)?
            };
            maps.insert(MapRef::Aligned(i), node);
            bridge_nodes.push(node);
            pending.remove(0);
            progressed = true;
        }
        if let Some(g) = group_iter.peek() {
            if g.inputs.iter().all(|m| maps.contains_key(m)) {
                let inputs: Vec<NodeId> = g.inputs.iter().map(|m| maps[m]).collect();
                let out = lsu::lsu_node(graph, &g.id, &inputs, &[1])?[0];
                maps.insert(MapRef::Subspace(g.anchor), out);
                group_iter.next();
                progressed = true;
            }
        }
        if pending.is_empty() && group_iter.peek().is_none() {
            break;
        }
        if !progressed {
            return Err(Error::invalid("forward", "network wiring has an unresolved dependency"));
        }
    }

    let mut heads = Vec::with_capacity(spec.supervision.len());
    for &m in &spec.supervision {
        heads.push((m, to_image_resolution(graph, maps[&m], spec.level_of(m))?));
    }
    let final_index = match spec.supervision.iter().position(|&m| m == spec.final_output) {
        Some(i) => i,
        None => {
            let node = to_image_resolution(graph, maps[&spec.final_output], spec.level_of(spec.final_output))?;
            heads.push((spec.final_output, node));
            heads.len() - 1
        }
    };
    Ok(ForwardNodes { heads, final_index, maps })
}

fn to_image_resolution<T: Scalar>(graph: &mut Graph<T>, node: NodeId, level: usize) -> Result<NodeId> {
    if level == 1 {
        Ok(node)
    } else {
        graph.upsample_bilinear(node, 1 << (level - 1))
    }
}

/// Evaluates every supervision point on `image`.
pub fn forward<T: Scalar>(spec: &NetworkSpec, params: &ParamSet<T>, image: &Tensor<T>) -> Result<SideOutputs<T>> {
    let mut graph = Graph::new(params.clone());
    let input = graph.input(image.clone());
    let nodes = record_forward(spec, &mut graph, input)?;
    Ok(SideOutputs {
        heads: nodes
            .heads
            .iter()
            .map(|&(m, n)| HeadOutput {
                map: m,
                name: spec.map_label(m),
                stage: spec.stage_of(m),
                logits: graph.value(n).clone(),
            })
            .collect(),
        final_index: nodes.final_index,
    })
}

/// Binary mask of `sigmoid(final) > threshold`; ties classify negative.
pub fn infer<T: Scalar>(spec: &NetworkSpec, params: &ParamSet<T>, image: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid("infer", format!("threshold {threshold} outside [0, 1]")));
    }
    let out = forward(spec, params, image)?;
    let t = T::from_f64_lossy(threshold);
    Ok(kernels::sigmoid(out.final_logits()).map(|p| if p > t { T::one() } else { T::zero() }))
}
