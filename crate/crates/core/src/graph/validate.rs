use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::fmt;

use crate::dtype::DataType;
use crate::error::{Error, Result};
use crate::tensor::element_count;

use super::spec::{GraphSpec, LayerKind, LayerSpec};

/// One invariant violation, optionally tied to a layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub layer: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.layer {
            Some(l) => write!(f, "layer '{l}': {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// A graph that passed validation, with its execution order and the
/// inferred shape and type of every blob.
#[derive(Debug, Clone)]
pub struct ValidGraph {
    pub spec: GraphSpec,
    /// Layer indices in execution order.
    pub order: Vec<usize>,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub dtypes: BTreeMap<String, DataType>,
    pub producer: BTreeMap<String, usize>,
    pub consumers: BTreeMap<String, Vec<usize>>,
}

impl ValidGraph {
    pub fn blob_bytes(&self, blob: &str) -> usize {
        element_count(&self.shapes[blob]) * self.dtypes[blob].byte_width()
    }

    pub fn outputs(&self) -> Vec<String> {
        self.spec.output_blobs().into_iter().map(str::to_string).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    graph: Option<ValidGraph>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(|v| v.to_string()).collect()
    }

    pub fn into_result(self) -> Result<ValidGraph> {
        match self.graph {
            Some(g) if self.violations.is_empty() => Ok(g),
            _ => Err(Error::InvalidGraph(self.messages().join("\n"))),
        }
    }
}

struct Checker {
    violations: Vec<Violation>,
}

impl Checker {
    fn layer(&mut self, l: &LayerSpec, msg: impl Into<String>) {
        self.violations.push(Violation { layer: Some(l.name.clone()), message: msg.into() });
    }

    fn graph(&mut self, msg: impl Into<String>) {
        self.violations.push(Violation { layer: None, message: msg.into() });
    }
}

fn lower(kind: LayerKind) -> String {
    kind.to_string().to_ascii_lowercase()
}

fn check_layer(c: &mut Checker, l: &LayerSpec) {
    let (mi, d, mo) = l.types();
    let (nb, nt) = (l.bottoms.len(), l.tops.len());
    let want_bottoms = if l.kind == LayerKind::Input { 0 } else { 1 };
    if nb != want_bottoms {
        c.layer(l, format!("{} takes {want_bottoms} bottom(s), got {nb}", lower(l.kind)));
    }
    if nt != 1 {
        c.layer(l, format!("{} produces 1 top, got {nt}", lower(l.kind)));
    }
    match l.kind {
        LayerKind::Input => {
            if !mo.is_float() {
                c.layer(l, format!("input must be a float type, got {mo}"));
            }
            match &l.input_param {
                Some(p) if (1..=4).contains(&p.shape.len()) && !p.shape.contains(&0) => {}
                Some(p) => c.layer(l, format!("input shape {:?} must have 1..=4 positive extents", p.shape)),
                None => c.layer(l, "input_param missing"),
            }
        }
        LayerKind::Quantizer | LayerKind::Moe => {
            if d != mi {
                c.layer(l, format!("{} compute type {d} must equal bottom type {mi}", lower(l.kind)));
            }
        }
        kind => {
            if !(mi == d && d == mo) {
                c.layer(l, format!("{} type mismatch: bottom {mi}, compute {d}, top {mo}", lower(kind)));
            } else if kind.fp32_only() && d != DataType::Fp32 {
                c.layer(l, format!("{} requires FP32, got {d}", lower(kind)));
            }
        }
    }
    let missing = match l.kind {
        LayerKind::Conv => l.convolution_param.is_none().then_some("convolution_param"),
        LayerKind::Pool => l.pooling_param.is_none().then_some("pooling_param"),
        LayerKind::InnerProduct => l.inner_product_param.is_none().then_some("inner_product_param"),
        LayerKind::Moe => l.moe_param.is_none().then_some("moe_param"),
        _ => None,
    };
    if let Some(m) = missing {
        c.layer(l, format!("{m} missing"));
    }
    if let Some(ip) = &l.inner_product_param {
        if ip.num_output == 0 {
            c.layer(l, "num_output must be positive");
        }
    }
    if let Some(lp) = &l.lrn_param {
        if lp.local_size % 2 == 0 {
            c.layer(l, format!("lrn local_size {} must be odd", lp.local_size));
        }
    }
}

/// Kahn's algorithm; among ready layers the earliest declared runs first.
fn topo_order(spec: &GraphSpec, producer: &BTreeMap<String, usize>) -> std::result::Result<Vec<usize>, Vec<usize>> {
    let n = spec.layers.len();
    let mut indegree = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for (i, l) in spec.layers.iter().enumerate() {
        for b in &l.bottoms {
            if let Some(&p) = producer.get(b) {
                indegree[i] += 1;
                succ[p].push(i);
            }
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &s in &succ[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(Reverse(s));
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err((0..n).filter(|&i| indegree[i] > 0).collect())
    }
}

fn infer_shape(l: &LayerSpec, input: Option<&[usize]>) -> std::result::Result<Vec<usize>, String> {
    if l.kind == LayerKind::Input {
        return Ok(l.input_param.as_ref().map(|p| p.shape.clone()).unwrap_or_default());
    }
    let x = input.ok_or("bottom shape unknown")?;
    let nchw = |what: &str| match *x {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(format!("{what} expects N,C,H,W input, got {x:?}")),
    };
    match l.kind {
        LayerKind::Conv => {
            let (n, c, h, w) = nchw("conv")?;
            let cp = &l.convolution_param.as_ref().ok_or("convolution_param missing")?.conv;
            if cp.out_channels == 0 {
                return Err("conv out_channels must be positive".into());
            }
            cp.check_groups(c).map_err(|e| e.to_string())?;
            let (oh, ow) = cp.output_extent(h, w).map_err(|e| e.to_string())?;
            Ok(vec![n, cp.out_channels, oh, ow])
        }
        LayerKind::Pool => {
            let (n, c, h, w) = nchw("pool")?;
            let pp = l.pooling_param.as_ref().ok_or("pooling_param missing")?;
            let (oh, ow) = pp.output_extent(h, w).map_err(|e| e.to_string())?;
            Ok(vec![n, c, oh, ow])
        }
        LayerKind::InnerProduct => {
            let ip = l.inner_product_param.as_ref().ok_or("inner_product_param missing")?;
            Ok(vec![x[0], ip.num_output])
        }
        LayerKind::Lrn => match x.len() {
            2 | 4 => Ok(x.to_vec()),
            _ => Err(format!("lrn expects N,C or N,C,H,W input, got {x:?}")),
        },
        LayerKind::Moe => {
            let mp = l.moe_param.as_ref().ok_or("moe_param missing")?;
            moe_shape(mp, x)
        }
        _ => Ok(x.to_vec()),
    }
}

/// Validates the nested nets of an MOE layer and returns its top shape.
fn moe_shape(mp: &super::spec::MoeParam, x: &[usize]) -> std::result::Result<Vec<usize>, String> {
    if mp.n_experts == 0 || mp.top_k == 0 || mp.top_k > mp.n_experts {
        return Err(format!("moe needs 1 <= top_k <= n_experts, got top_k {} of {}", mp.top_k, mp.n_experts));
    }
    let mut out_shape = None;
    for (what, net) in [("gating", &mp.gating_net), ("expert", &mp.expert_net)] {
        let g = validate(net).into_result().map_err(|e| format!("{what} net: {e}"))?;
        let ins = g.spec.input_blobs();
        let outs = g.outputs();
        if ins.len() != 1 || outs.len() != 1 {
            return Err(format!("{what} net needs exactly one input and one output"));
        }
        if g.spec.layers.iter().any(|l| !l.compute_data_type.is_float() || l.top_data_type != DataType::Fp32) {
            return Err(format!("{what} net must compute in FP32"));
        }
        if g.shapes[ins[0]][1..] != x[1..] || g.shapes[ins[0]].len() != x.len() {
            return Err(format!("{what} net input {:?} does not match moe input {x:?}", g.shapes[ins[0]]));
        }
        if what == "expert" {
            let mut s = g.shapes[&outs[0]].clone();
            s[0] = x[0];
            out_shape = Some(s);
        } else if g.shapes[&outs[0]].len() != 2 {
            return Err(format!("gating net output must be N,D, got {:?}", g.shapes[&outs[0]]));
        }
    }
    Ok(out_shape.expect("expert shape set"))
}

/// Checks every graph invariant and reports all violations found.
pub fn validate(spec: &GraphSpec) -> ValidationReport {
    let mut c = Checker { violations: Vec::new() };
    if spec.layers.is_empty() {
        c.graph("graph has no layers");
    }
    let mut names = BTreeSet::new();
    for l in &spec.layers {
        if l.name.is_empty() {
            c.graph("layer with empty name");
        } else if !names.insert(l.name.as_str()) {
            c.layer(l, "duplicate layer name");
        }
        check_layer(&mut c, l);
    }

    let mut producer: BTreeMap<String, usize> = BTreeMap::new();
    for (i, l) in spec.layers.iter().enumerate() {
        for t in &l.tops {
            if let Some(&p) = producer.get(t) {
                c.layer(l, format!("blob '{t}' already produced by '{}'", spec.layers[p].name));
            } else {
                producer.insert(t.clone(), i);
            }
        }
    }
    let mut consumers: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, l) in spec.layers.iter().enumerate() {
        for b in &l.bottoms {
            match producer.get(b) {
                None => c.layer(l, format!("blob '{b}' is consumed but never produced")),
                Some(&p) => {
                    let pl = &spec.layers[p];
                    if pl.top_data_type != l.bottom_data_type {
                        c.layer(
                            l,
                            format!(
                                "blob '{b}' dtype mismatch: produced as {} by '{}', consumed as {}",
                                pl.top_data_type, pl.name, l.bottom_data_type
                            ),
                        );
                    }
                }
            }
            consumers.entry(b.clone()).or_default().push(i);
        }
    }
    for b in &spec.inspect {
        if !producer.contains_key(b) {
            c.graph(format!("inspect blob '{b}' does not exist"));
        }
    }

    let order = match topo_order(spec, &producer) {
        Ok(o) => o,
        Err(stuck) => {
            let names: Vec<&str> = stuck.iter().map(|&i| spec.layers[i].name.as_str()).collect();
            c.graph(format!("not a DAG: cycle through {}", names.join(", ")));
            return ValidationReport { violations: c.violations, graph: None };
        }
    };

    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut dtypes = BTreeMap::new();
    for &i in &order {
        let l = &spec.layers[i];
        let input = l.bottoms.first().and_then(|b| shapes.get(b)).map(Vec::as_slice);
        if l.kind != LayerKind::Input && input.is_none() {
            continue;
        }
        match infer_shape(l, input) {
            Ok(s) => {
                for t in &l.tops {
                    shapes.insert(t.clone(), s.clone());
                    dtypes.insert(t.clone(), l.top_data_type);
                }
            }
            Err(m) => c.layer(l, m),
        }
    }

    let graph = c.violations.is_empty().then(|| ValidGraph {
        spec: spec.clone(),
        order,
        shapes,
        dtypes,
        producer,
        consumers,
    });
    ValidationReport { violations: c.violations, graph }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::spec::{InnerProductParam, Filler};

    pub(crate) fn celsius() -> GraphSpec {
        let mut fc = LayerSpec::new("neuron", LayerKind::InnerProduct, &["celsius"], &["neuron"]);
        fc.inner_product_param = Some(InnerProductParam {
            num_output: 1,
            bias_term: true,
            weight_filler: Filler::Constant { value: 1.8 },
            bias_filler: Filler::Constant { value: 32.0 },
        });
        GraphSpec::new(
            "celsius",
            vec![
                LayerSpec::input("celsius", "celsius", &[1, 1, 1, 1]),
                fc,
                LayerSpec::new("output", LayerKind::Quantizer, &["neuron"], &["output"]),
            ],
        )
    }

    #[test]
    fn celsius_is_valid() {
        let r = validate(&celsius());
        assert!(r.is_valid(), "{:?}", r.messages());
        let g = r.into_result().unwrap();
        assert_eq!(g.order, vec![0, 1, 2]);
        assert_eq!(g.shapes["neuron"], vec![1, 1]);
        assert_eq!(g.outputs(), vec!["output"]);
    }

    #[test]
    fn relu_type_mismatch() {
        let mut g = celsius();
        g.layers.push(
            LayerSpec::new("act", LayerKind::Relu, &["output"], &["act"]).with_types(
                DataType::Fp32,
                DataType::Int8Q,
                DataType::Int8Q,
            ),
        );
        let r = validate(&g);
        assert!(r.messages().iter().any(|m| m.contains("relu type mismatch")), "{:?}", r.messages());
    }

    #[test]
    fn cycle_detected() {
        let mut g = celsius();
        g.layers.push(LayerSpec::new("a", LayerKind::Relu, &["b"], &["a"]));
        g.layers.push(LayerSpec::new("b", LayerKind::Relu, &["a"], &["b"]));
        let r = validate(&g);
        assert!(r.messages().iter().any(|m| m.contains("not a DAG")), "{:?}", r.messages());
        assert!(r.into_result().is_err());
    }

    #[test]
    fn reports_every_violation() {
        let mut g = celsius();
        g.layers.push(LayerSpec::new("s", LayerKind::Softmax, &["nowhere"], &["s"]).with_types(
            DataType::Fp16,
            DataType::Fp16,
            DataType::Fp16,
        ));
        g.layers.push(LayerSpec::new("neuron", LayerKind::Dropout, &["output"], &["output"]));
        g.inspect.push("ghost".into());
        let msgs = validate(&g).messages();
        for want in ["softmax requires FP32", "never produced", "duplicate layer name", "already produced", "ghost"] {
            assert!(msgs.iter().any(|m| m.contains(want)), "missing '{want}' in {msgs:?}");
        }
    }

    #[test]
    fn edge_dtype_mismatch() {
        let mut g = celsius();
        g.layers[1] = g.layers[1].clone().with_types(DataType::Int8Q, DataType::Int8Q, DataType::Int8Q);
        let msgs = validate(&g).messages();
        assert!(msgs.iter().any(|m| m.contains("blob 'celsius' dtype mismatch")), "{msgs:?}");
        assert!(msgs.iter().any(|m| m.contains("blob 'neuron' dtype mismatch")), "{msgs:?}");
    }

    #[test]
    fn ties_follow_declaration_order() {
        let g = GraphSpec::new(
            "fan",
            vec![
                LayerSpec::input("in", "x", &[1, 4]),
                LayerSpec::new("late", LayerKind::Relu, &["e"], &["f"]),
                LayerSpec::new("b", LayerKind::Relu, &["x"], &["b"]),
                LayerSpec::new("a", LayerKind::Relu, &["x"], &["e"]),
            ],
        );
        assert_eq!(validate(&g).into_result().unwrap().order, vec![0, 2, 3, 1]);
    }

    #[test]
    fn conv_shape_errors() {
        let mut conv = LayerSpec::new("c", LayerKind::Conv, &["x"], &["y"]);
        conv.convolution_param = Some(crate::graph::spec::ConvolutionParam {
            conv: crate::ops::ConvParams::square(5, 1, 0, 2),
            bias_term: true,
            weight_filler: Filler::default(),
            bias_filler: Filler::default(),
        });
        let g = GraphSpec::new("c", vec![LayerSpec::input("in", "x", &[1, 1, 3, 3]), conv.clone()]);
        assert!(!validate(&g).is_valid());
        let g = GraphSpec::new("c", vec![LayerSpec::input("in", "x", &[1, 3]), conv]);
        assert!(validate(&g).messages()[0].contains("N,C,H,W"));
    }
}
