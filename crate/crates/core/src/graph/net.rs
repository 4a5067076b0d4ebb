//! Network construction and forward execution.

use std::collections::{BTreeMap, BTreeSet};

use crate::dtype::DataType;
use crate::error::{Error, Result};
use crate::moe::{GatingParams, MoeLayer};
use crate::ops;
use crate::quant::{pseudo_quantize, quantize, ObservationState, QuantKey, QuantMode, Quantizer, QuantizerValues};
use crate::tensor::Tensor;

use super::params::{fill, param_specs};
use super::plan::{plan_memory, MemoryPlan};
use super::spec::{GraphSpec, LayerKind, LayerSpec};
use super::store::{convert_param, Model};
use super::validate::{validate, ValidGraph};

/// The quantizers of one layer: one per bottom, top and parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuantizers {
    pub layer: String,
    pub bottoms: Vec<Quantizer>,
    pub tops: Vec<Quantizer>,
    pub params: Vec<Quantizer>,
}

impl LayerQuantizers {
    pub fn len(&self) -> usize {
        self.bottoms.len() + self.tops.len() + self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut Quantizer> {
        self.bottoms.iter_mut().chain(&mut self.tops).chain(&mut self.params)
    }
}

/// Fresh quantizers for every layer of `g`, in declaration order.
pub fn attach_quantizers(g: &GraphSpec) -> Vec<LayerQuantizers> {
    g.layers
        .iter()
        .map(|l| LayerQuantizers {
            layer: l.name.clone(),
            bottoms: l.bottoms.iter().map(|b| Quantizer::new(QuantKey::Bottom(b.clone()))).collect(),
            tops: l.tops.iter().map(|t| Quantizer::new(QuantKey::Top(t.clone()))).collect(),
            params: l.param_names().into_iter().map(|p| Quantizer::new(QuantKey::Param(p))).collect(),
        })
        .collect()
}

type Observations = BTreeMap<(usize, QuantKey), ObservationState>;

/// A validated, parameterized network.
///
/// `infer` takes `&self` and may run concurrently; each call gets its own
/// buffer arena laid out by the memory plan. `forward` additionally
/// records observations in OBSERVE mode.
#[derive(Debug, Clone)]
pub struct Net {
    graph: ValidGraph,
    plan: MemoryPlan,
    /// Parameters at their persisted type (the owning layer's compute type).
    params: BTreeMap<String, Tensor>,
    /// Parameters as the layers consume them.
    prepared: BTreeMap<String, Tensor>,
    ranges: BTreeMap<String, ObservationState>,
    quantizers: Vec<LayerQuantizers>,
    mode: QuantMode,
    blob_qvals: BTreeMap<String, QuantizerValues>,
    pseudo: BTreeMap<String, DataType>,
    moes: BTreeMap<usize, MoeLayer>,
}

impl Net {
    /// Builds a net from `spec`. Parameters come from `model` when given
    /// (every set must be present with the right shape), otherwise from the
    /// layer fillers seeded with `seed`.
    pub fn new(spec: &GraphSpec, model: Option<&Model>, seed: u64) -> Result<Net> {
        let graph = validate(spec).into_result()?;
        let mut params = BTreeMap::new();
        let mut stored_type = BTreeMap::new();
        for ps in param_specs(&graph)? {
            let t = match model {
                Some(m) => {
                    let t = m.params.get(&ps.name).ok_or_else(|| Error::MissingParam(ps.name.clone()))?;
                    if t.shape() != ps.shape {
                        return Err(Error::ShapeMismatch(format!(
                            "parameter '{}' is {:?}, expected {:?}",
                            ps.name,
                            t.shape(),
                            ps.shape
                        )));
                    }
                    t.clone()
                }
                None => fill(&ps.filler, &ps.shape, &ps.name, seed)?,
            };
            let d = graph.spec.layers[ps.layer].compute_data_type;
            stored_type.insert(ps.name.clone(), (d, ps.layer));
            params.insert(ps.name, t);
        }

        let mut stored = BTreeMap::new();
        let mut prepared = BTreeMap::new();
        for (name, t) in &params {
            let (d, layer) = stored_type[name];
            let s = convert_param(t, d)?;
            let is_moe = graph.spec.layers[layer].kind == LayerKind::Moe;
            prepared.insert(name.clone(), if is_moe { convert_param(t, DataType::Fp32)? } else { s.clone() });
            stored.insert(name.clone(), s);
        }

        let mut moes = BTreeMap::new();
        for (i, l) in graph.spec.layers.iter().enumerate() {
            if l.kind == LayerKind::Moe {
                moes.insert(i, build_moe(l, &prepared, seed)?);
            }
        }

        let plan = plan_memory(&graph, true);
        let quantizers = attach_quantizers(&graph.spec);
        Ok(Net {
            plan,
            params: stored,
            prepared,
            ranges: model.map(|m| m.ranges.clone()).unwrap_or_default(),
            quantizers,
            mode: QuantMode::Passive,
            blob_qvals: BTreeMap::new(),
            pseudo: BTreeMap::new(),
            moes,
            graph,
        })
    }

    pub fn graph(&self) -> &ValidGraph {
        &self.graph
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.graph.spec
    }

    pub fn plan(&self) -> &MemoryPlan {
        &self.plan
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn quantizers(&self) -> &[LayerQuantizers] {
        &self.quantizers
    }

    pub fn input_names(&self) -> Vec<String> {
        self.graph.spec.input_blobs().into_iter().map(str::to_string).collect()
    }

    pub fn output_names(&self) -> Vec<String> {
        self.graph.outputs()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn blob_qvals(&self, blob: &str) -> Option<&QuantizerValues> {
        self.blob_qvals.get(blob)
    }

    /// Re-attaches quantizers if any layer lacks them. Existing quantizers
    /// and their observations are kept.
    pub fn attach_quantizers(&mut self) {
        if self.quantizers.len() != self.graph.spec.layers.len() {
            self.quantizers = attach_quantizers(&self.graph.spec);
        }
    }

    /// Model ranges widened by everything observed so far, per blob.
    pub fn calibration(&self) -> BTreeMap<String, ObservationState> {
        let mut out = self.ranges.clone();
        for lq in &self.quantizers {
            for q in lq.bottoms.iter().chain(&lq.tops).filter(|q| !q.state.is_empty()) {
                let e = out.entry(q.key.name().to_string()).or_default();
                *e = e.merge(&q.state);
            }
        }
        out
    }

    /// Parameters at their layers' compute types plus the calibration.
    pub fn model(&self) -> Model {
        Model { params: self.params.clone(), ranges: self.calibration() }
    }

    /// Marks `blob` for pseudo-quantization at `dtype` in PSEUDO mode.
    pub fn flag_pseudo(&mut self, blob: &str, dtype: DataType) -> Result<()> {
        if !dtype.is_quantized() {
            return Err(Error::NotQuantized { dtype });
        }
        match self.graph.dtypes.get(blob) {
            None => Err(Error::InvalidParam(format!("no blob '{blob}'"))),
            Some(d) if !d.is_float() => Err(Error::RequiresFloat { op: "pseudo-quantization", dtype: *d }),
            Some(_) => {
                self.pseudo.insert(blob.to_string(), dtype);
                Ok(())
            }
        }
    }

    /// Flags every float blob not produced by an INPUT layer.
    pub fn flag_all_pseudo(&mut self, dtype: DataType) -> Result<()> {
        let blobs: Vec<String> = self
            .graph
            .spec
            .layers
            .iter()
            .filter(|l| l.kind != LayerKind::Input)
            .flat_map(|l| l.tops.clone())
            .filter(|t| self.graph.dtypes[t].is_float())
            .collect();
        blobs.iter().try_for_each(|b| self.flag_pseudo(b, dtype))
    }

    /// Switches every quantizer to `mode`. QUANTIZED resolves quantizer
    /// values for every quantized blob and PSEUDO for every flagged blob;
    /// either fails naming the first blob without a range.
    pub fn set_quant_mode(&mut self, mode: QuantMode) -> Result<()> {
        let mut resolved = BTreeMap::new();
        let ranges = self.calibration();
        let wanted: Vec<(String, DataType)> = match mode {
            QuantMode::Quantized => {
                self.graph.dtypes.iter().filter(|(_, d)| d.is_quantized()).map(|(b, d)| (b.clone(), *d)).collect()
            }
            QuantMode::Pseudo => self.pseudo.iter().map(|(b, d)| (b.clone(), *d)).collect(),
            _ => Vec::new(),
        };
        for (blob, dtype) in wanted {
            let qv = self.resolve_qvals(&blob, dtype, &ranges, &mut resolved)?;
            resolved.insert(blob, qv);
        }
        self.blob_qvals = resolved;
        for lq in &mut self.quantizers {
            lq.iter_mut().for_each(|q| q.mode = mode);
        }
        self.mode = mode;
        Ok(())
    }

    fn producer(&self, blob: &str) -> &LayerSpec {
        &self.graph.spec.layers[self.graph.producer[blob]]
    }

    /// Value-preserving layers pass their input's quantizer values through;
    /// everything else is finalized from its observed range.
    fn resolve_qvals(
        &self,
        blob: &str,
        dtype: DataType,
        ranges: &BTreeMap<String, ObservationState>,
        done: &mut BTreeMap<String, QuantizerValues>,
    ) -> Result<QuantizerValues> {
        if let Some(qv) = done.get(blob).filter(|q| q.dtype() == dtype) {
            return Ok(*qv);
        }
        let l = self.producer(blob);
        if l.kind.value_preserving() && l.bottom_data_type == dtype {
            let qv = self.resolve_qvals(&l.bottoms[0], dtype, ranges, done)?;
            done.insert(l.bottoms[0].clone(), qv);
            return Ok(qv);
        }
        let range = self.range_of(blob, ranges).ok_or_else(|| Error::NotCalibrated(format!("no range for blob '{blob}'")))?;
        range.finalize(dtype)
    }

    fn range_of(&self, blob: &str, ranges: &BTreeMap<String, ObservationState>) -> Option<ObservationState> {
        if let Some(r) = ranges.get(blob).filter(|r| !r.is_empty()) {
            return Some(*r);
        }
        let l = self.producer(blob);
        if l.kind.value_preserving() {
            return self.range_of(&l.bottoms[0], ranges);
        }
        None
    }

    /// Runs the net; in OBSERVE mode every quantizer widens its range.
    pub fn forward(&mut self, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        if self.mode != QuantMode::Observe {
            return self.infer(inputs);
        }
        let mut obs = Observations::new();
        let out = self.run(inputs, Some(&mut obs))?;
        for ((li, key), state) in obs {
            let lq = &mut self.quantizers[li];
            if let Some(q) = lq.iter_mut().find(|q| q.key == key) {
                q.state = q.state.merge(&state);
            }
        }
        Ok(out)
    }

    /// Runs the net without recording anything.
    pub fn infer(&self, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        self.run(inputs, None)
    }

    fn run(&self, inputs: &BTreeMap<String, Tensor>, mut obs: Option<&mut Observations>) -> Result<BTreeMap<String, Tensor>> {
        if self.mode != QuantMode::Quantized {
            if let Some(l) = self.graph.spec.layers.iter().find(|l| {
                [l.bottom_data_type, l.compute_data_type, l.top_data_type].iter().any(|d| d.is_quantized())
            }) {
                return Err(Error::ModeRequired(l.name.clone()));
            }
        }
        let mut arena: Vec<Option<(String, Tensor)>> = vec![None; self.plan.slot_count()];
        let mut keep: BTreeMap<String, Tensor> = BTreeMap::new();
        let exported: BTreeSet<String> =
            self.graph.outputs().into_iter().chain(self.graph.spec.inspect.iter().cloned()).collect();

        for &li in &self.graph.order {
            let l = &self.graph.spec.layers[li];
            let mut bottoms = Vec::with_capacity(l.bottoms.len());
            for b in &l.bottoms {
                let slot = self.plan.assignment[b];
                match &arena[slot] {
                    Some((name, t)) if name == b => bottoms.push(t.clone()),
                    _ => return Err(Error::InvalidGraph(format!("blob '{b}' not live when '{}' runs", l.name))),
                }
                let t = bottoms.last().expect("pushed");
                if t.dtype() != l.bottom_data_type {
                    return Err(Error::DtypeMismatch(format!(
                        "layer '{}' expects {} on '{b}', got {}",
                        l.name,
                        l.bottom_data_type,
                        t.dtype()
                    )));
                }
            }
            let mut top = self.exec(l, li, &bottoms, inputs)?;
            if top.dtype() != l.top_data_type {
                return Err(Error::DtypeMismatch(format!(
                    "layer '{}' produced {}, declared {}",
                    l.name,
                    top.dtype(),
                    l.top_data_type
                )));
            }
            let name = &l.tops[0];
            if self.mode == QuantMode::Pseudo {
                if let Some(&d) = self.pseudo.get(name) {
                    let qv = &self.blob_qvals[name];
                    let f = Tensor::from_f32(top.shape(), &top.float_values()?)?;
                    let pq = pseudo_quantize(&f, qv, d)?;
                    top = Tensor::from_f32_with(top.dtype(), top.shape(), &pq.float_values()?)?;
                }
            }
            if let Some(obs) = obs.as_deref_mut() {
                let mut record = |key: QuantKey, t: &Tensor| -> Result<()> {
                    let e = obs.entry((li, key)).or_default();
                    *e = e.observe(t)?;
                    Ok(())
                };
                for (b, t) in l.bottoms.iter().zip(&bottoms) {
                    record(QuantKey::Bottom(b.clone()), t)?;
                }
                record(QuantKey::Top(name.clone()), &top)?;
                for p in l.param_names() {
                    record(QuantKey::Param(p.clone()), &self.prepared[&p])?;
                }
            }
            if exported.contains(name) {
                keep.insert(name.clone(), top.clone());
            }
            arena[self.plan.assignment[name]] = Some((name.clone(), top));
        }
        Ok(keep)
    }

    fn out_qv(&self, l: &LayerSpec) -> Result<Option<&QuantizerValues>> {
        if !l.top_data_type.is_quantized() {
            return Ok(None);
        }
        let t = &l.tops[0];
        self.blob_qvals
            .get(t)
            .map(Some)
            .ok_or_else(|| Error::NotCalibrated(format!("no quantizer values for blob '{t}'")))
    }

    fn exec(&self, l: &LayerSpec, li: usize, bottoms: &[Tensor], inputs: &BTreeMap<String, Tensor>) -> Result<Tensor> {
        let p = |suffix: &str| self.prepared.get(&format!("{}.{suffix}", l.name));
        let x = bottoms.first();
        match l.kind {
            LayerKind::Input => {
                let top = &l.tops[0];
                let t = inputs.get(top).ok_or_else(|| Error::MissingInput(top.clone()))?;
                let want = &l.input_param.as_ref().expect("validated").shape;
                if t.shape().len() != want.len() || t.shape()[1..] != want[1..] {
                    return Err(Error::ShapeMismatch(format!("input '{top}' is {:?}, expected {want:?}", t.shape())));
                }
                if t.dtype() != l.top_data_type {
                    return Err(Error::DtypeMismatch(format!("input '{top}' is {}, expected {}", t.dtype(), l.top_data_type)));
                }
                Ok(t.clone())
            }
            LayerKind::Conv => {
                let cp = &l.convolution_param.as_ref().expect("validated").conv;
                let w = p("weight").ok_or_else(|| Error::MissingParam(format!("{}.weight", l.name)))?;
                ops::conv_forward(x.expect("validated"), w, p("bias"), cp, self.out_qv(l)?)
            }
            LayerKind::InnerProduct => {
                let w = p("weight").ok_or_else(|| Error::MissingParam(format!("{}.weight", l.name)))?;
                ops::inner_product(x.expect("validated"), w, p("bias"), self.out_qv(l)?)
            }
            LayerKind::Pool => ops::pool_max(x.expect("validated"), l.pooling_param.as_ref().expect("validated")),
            LayerKind::Relu => {
                let x = x.expect("validated");
                match self.out_qv(l)? {
                    Some(qv) => ops::relu_quant(x, qv),
                    None => ops::relu_float(x, l.relu_param.map(|r| r.negative_slope).unwrap_or(0.0)),
                }
            }
            LayerKind::Lrn => ops::lrn(x.expect("validated"), &l.lrn_param.unwrap_or_default()),
            LayerKind::Softmax => ops::softmax(x.expect("validated")),
            LayerKind::Dropout => Ok(ops::dropout_inference(x.expect("validated"))),
            LayerKind::Quantizer => convert(x.expect("validated"), l.top_data_type, self.out_qv(l)?),
            LayerKind::Moe => {
                let y = self.moes[&li].forward(x.expect("validated"))?.output;
                convert(&y, l.top_data_type, self.out_qv(l)?)
            }
        }
    }

    /// The runtime MOE layer built for layer `name`.
    pub fn moe_layer(&self, name: &str) -> Option<&MoeLayer> {
        let i = self.graph.spec.layers.iter().position(|l| l.name == name)?;
        self.moes.get(&i)
    }
}

/// Converts `t` to `dtype`, quantizing with `qv` when `dtype` is quantized.
fn convert(t: &Tensor, dtype: DataType, qv: Option<&QuantizerValues>) -> Result<Tensor> {
    if t.dtype() == dtype && (!dtype.is_quantized() || t.qvals() == qv) {
        return Ok(t.clone());
    }
    let values = t.to_f32_vec();
    if dtype.is_float() {
        return Tensor::from_f32_with(dtype, t.shape(), &values);
    }
    let qv = qv.ok_or(Error::MissingQuantizerValues)?;
    quantize(&Tensor::from_f32(t.shape(), &values)?, qv, dtype)
}

fn build_moe(l: &LayerSpec, prepared: &BTreeMap<String, Tensor>, seed: u64) -> Result<MoeLayer> {
    let mp = l.moe_param.as_ref().expect("validated");
    let sub = |prefix: String, spec: &GraphSpec| -> Result<Net> {
        let params = prepared
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|rest| (rest.to_string(), v.clone())))
            .collect();
        Net::new(spec, Some(&Model { params, ranges: BTreeMap::new() }), seed)
    };
    let gating = sub(format!("{}.gating.", l.name), &mp.gating_net)?;
    let experts = (0..mp.n_experts)
        .map(|e| sub(format!("{}.expert{e}.", l.name), &mp.expert_net))
        .collect::<Result<Vec<_>>>()?;
    let get = |w: &str| prepared[&format!("{}.{w}", l.name)].to_f32_vec();
    let w_a = get("w_a");
    let gp = GatingParams {
        n_experts: mp.n_experts,
        top_k: mp.top_k,
        dim: w_a.len() / mp.n_experts,
        w_a,
        w_b: get("w_b"),
        w_c: get("w_c"),
        noise: mp.noise,
        seed: mp.seed,
    };
    MoeLayer::new(gating, experts, gp, mp.batch_mode)
}

/// Input map with a single entry.
pub fn single_input(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
    [(name.to_string(), t)].into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::precision::apply_precision;

    fn celsius() -> GraphSpec {
        GraphSpec::from_json(include_str!("../../testdata/celsius.json")).unwrap()
    }

    fn batch(values: &[f32]) -> BTreeMap<String, Tensor> {
        single_input("celsius", Tensor::from_f32(&[values.len(), 1, 1, 1], values).unwrap())
    }

    #[test]
    fn celsius_fp32() {
        let net = Net::new(&celsius(), None, 0).unwrap();
        let out = net.infer(&batch(&[100.0, 0.0, -40.0])).unwrap();
        assert_eq!(out["output"].to_f32_vec(), vec![212.0, 32.0, -40.0]);
        assert_eq!(out["output"].shape(), &[3, 1]);
    }

    #[test]
    fn quantizer_counts_and_idempotent_attach() {
        let mut net = Net::new(&celsius(), None, 0).unwrap();
        let counts: Vec<usize> = net.quantizers().iter().map(|q| q.len()).collect();
        // input: top only; inner product: bottom, top, weight, bias
        assert_eq!(counts, vec![1, 4, 2]);
        let before = net.quantizers().to_vec();
        net.attach_quantizers();
        assert_eq!(net.quantizers(), before.as_slice());
        assert_eq!(attach_quantizers(net.spec()), attach_quantizers(net.spec()));
    }

    fn calibrated_model() -> Model {
        let mut net = Net::new(&celsius(), None, 0).unwrap();
        net.set_quant_mode(QuantMode::Observe).unwrap();
        let xs: Vec<f32> = (-273..=1000).map(|c| c as f32).collect();
        net.forward(&batch(&xs)).unwrap();
        net.model()
    }

    #[test]
    fn observe_records_ranges() {
        let m = calibrated_model();
        assert_eq!((m.ranges["celsius"].seen_min, m.ranges["celsius"].seen_max), (-273.0, 1000.0));
        let r = m.ranges["neuron"];
        assert!((r.seen_min - -459.4).abs() < 1e-3 && r.seen_max == 1832.0, "{r:?}");
    }

    #[test]
    fn passive_matches_plain_float_execution() {
        let mut net = Net::new(&celsius(), None, 0).unwrap();
        let x = batch(&[12.5, -7.25]);
        let a = net.infer(&x).unwrap();
        net.set_quant_mode(QuantMode::Passive).unwrap();
        assert_eq!(net.forward(&x).unwrap(), a);
        assert!(net.quantizers().iter().all(|lq| lq.bottoms.iter().chain(&lq.tops).all(|q| q.state.is_empty())));
    }

    #[test]
    fn quantized_needs_calibration_and_mode() {
        let q = apply_precision(&celsius(), DataType::Int8Q);
        let mut net = Net::new(&q, None, 0).unwrap();
        assert!(matches!(net.infer(&batch(&[1.0])), Err(Error::ModeRequired(_))));
        let err = net.set_quant_mode(QuantMode::Quantized).unwrap_err();
        assert!(matches!(&err, Error::NotCalibrated(m) if m.contains("celsius")), "{err}");
        assert!(err.to_string().starts_with("model not calibrated"));
    }

    #[test]
    fn celsius_int8_and_int16_within_one_step() {
        let m = calibrated_model();
        for (d, bound) in [(DataType::Int8Q, 8.74), (DataType::Int16Q, 0.034)] {
            let q = apply_precision(&celsius(), d);
            let fp = m.with_param_types(&[("neuron.weight".to_string(), d), ("neuron.bias".to_string(), d)].into_iter().collect()).unwrap();
            let mut net = Net::new(&q, Some(&fp), 0).unwrap();
            net.set_quant_mode(QuantMode::Quantized).unwrap();
            let xs: Vec<f32> = (-273..1000).map(|c| c as f32).collect();
            let out = net.infer(&batch(&xs)).unwrap()["output"].to_f32_vec();
            let worst = xs.iter().zip(&out).map(|(c, f)| (f64::from(*f) - (f64::from(*c) * 1.8 + 32.0)).abs()).fold(0.0, f64::max);
            assert!(worst <= bound, "{d}: {worst}");
        }
    }

    #[test]
    fn quantized_forward_is_composition_of_ops() {
        let m = calibrated_model();
        let q = apply_precision(&celsius(), DataType::Int8Q);
        let mut net = Net::new(&q, Some(&m), 0).unwrap();
        net.set_quant_mode(QuantMode::Quantized).unwrap();
        let x = Tensor::from_f32(&[3, 1, 1, 1], &[-10.0, 3.0, 777.0]).unwrap();
        let got = net.infer(&single_input("celsius", x.clone())).unwrap();

        let qx = quantize(&x, net.blob_qvals("celsius_int8").unwrap(), DataType::Int8Q).unwrap();
        let y = ops::inner_product(
            &qx,
            &convert_param(m.params.get("neuron.weight").unwrap(), DataType::Int8Q).unwrap(),
            Some(&convert_param(m.params.get("neuron.bias").unwrap(), DataType::Int8Q).unwrap()),
            net.blob_qvals("neuron"),
        )
        .unwrap();
        assert_eq!(got["output"], Tensor::from_f32(y.shape(), &y.to_f32_vec()).unwrap());
        // weights persisted at the compute type
        assert_eq!(net.model().params["neuron.weight"].dtype(), DataType::Int8Q);
    }

    #[test]
    fn pseudo_mode_bins_flagged_blobs() {
        let m = calibrated_model();
        let mut net = Net::new(&celsius(), Some(&m), 0).unwrap();
        net.flag_all_pseudo(DataType::Int8Q).unwrap();
        net.set_quant_mode(QuantMode::Pseudo).unwrap();
        let xs: Vec<f32> = (0..2000).map(|i| -273.0 + i as f32 * 0.637).collect();
        let out = net.infer(&batch(&xs)).unwrap()["output"].to_f32_vec();
        // levels 0..=255: at most 256 distinct values
        let distinct: BTreeSet<u32> = out.iter().map(|v| v.to_bits()).collect();
        assert!(distinct.len() <= 256, "{}", distinct.len());
        let again = net.infer(&batch(&xs)).unwrap();
        assert_eq!(again["output"].to_f32_vec(), out);

        let mut fresh = Net::new(&celsius(), None, 0).unwrap();
        fresh.flag_pseudo("neuron", DataType::Int8Q).unwrap();
        assert!(matches!(fresh.set_quant_mode(QuantMode::Pseudo), Err(Error::NotCalibrated(_))));
        assert!(fresh.flag_pseudo("ghost", DataType::Int8Q).is_err());
    }

    #[test]
    fn input_errors() {
        let net = Net::new(&celsius(), None, 0).unwrap();
        assert!(matches!(net.infer(&BTreeMap::new()), Err(Error::MissingInput(n)) if n == "celsius"));
        let bad = single_input("celsius", Tensor::from_f32(&[1, 2, 1, 1], &[0.0, 0.0]).unwrap());
        assert!(matches!(net.infer(&bad), Err(Error::ShapeMismatch(_))));
        let half = single_input("celsius", Tensor::from_f32_as_fp16(&[1, 1, 1, 1], &[1.0]).unwrap());
        assert!(matches!(net.infer(&half), Err(Error::DtypeMismatch(_))));
    }

    #[test]
    fn model_params_must_match() {
        let mut m = calibrated_model();
        m.params.remove("neuron.bias");
        assert!(matches!(Net::new(&celsius(), Some(&m), 0), Err(Error::MissingParam(p)) if p == "neuron.bias"));
        let mut m = calibrated_model();
        m.params.insert("neuron.weight".into(), Tensor::from_f32(&[2], &[1.0, 2.0]).unwrap());
        assert!(matches!(Net::new(&celsius(), Some(&m), 0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn fp16_close_to_fp32() {
        let m = calibrated_model();
        let h = apply_precision(&celsius(), DataType::Fp16);
        let hm = m.with_param_types(&[("neuron.weight".to_string(), DataType::Fp16), ("neuron.bias".to_string(), DataType::Fp16)].into_iter().collect()).unwrap();
        let net = Net::new(&h, Some(&hm), 0).unwrap();
        let xs: Vec<f32> = (-273..1000).map(|c| c as f32).collect();
        let out = net.infer(&batch(&xs)).unwrap()["output"].to_f32_vec();
        // half an output ulp plus the error of storing 1.8 as binary16
        let w16 = crate::fp16::fp16_decode(crate::fp16::fp16_encode(1.8)) as f64;
        let mut worst = 0.0f64;
        for (c, f) in xs.iter().zip(&out) {
            let truth = *c as f64 * 1.8 + 32.0;
            let ulp = if truth.abs() >= 1024.0 { 1.0 } else if truth.abs() >= 512.0 { 0.5 } else { 0.25 };
            let err = (*f as f64 - truth).abs();
            assert!(err <= ulp / 2.0 + (*c as f64).abs() * (1.8 - w16).abs() + 1e-9, "{c}: {f}");
            worst = worst.max(err);
        }
        assert!(worst < 0.61, "{worst}");
    }
}
