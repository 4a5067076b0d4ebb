//! Per-precision graph variants.

use std::collections::BTreeMap;

use crate::dtype::DataType;

use super::spec::{GraphSpec, LayerKind, LayerSpec};

/// Rewrites every layer's types for `precision` and bridges each edge whose
/// producer and consumer disagree with an inserted QUANTIZER layer.
///
/// INPUT layers keep their type, SOFTMAX and LRN stay FP32, and an existing
/// QUANTIZER keeps its top type while its bottom follows the producer. The
/// converter for blob `b` at type `t` is named `b_to_<t>` and produces
/// `b_<t>`; one converter is shared by all consumers needing the same type.
pub fn apply_precision(spec: &GraphSpec, precision: DataType) -> GraphSpec {
    let mut layers: Vec<LayerSpec> = spec.layers.clone();
    let mut top_type: BTreeMap<String, DataType> = BTreeMap::new();
    for l in &mut layers {
        match l.kind {
            LayerKind::Input => {}
            LayerKind::Quantizer => {}
            k if k.fp32_only() => {
                l.bottom_data_type = DataType::Fp32;
                l.compute_data_type = DataType::Fp32;
                l.top_data_type = DataType::Fp32;
            }
            _ => {
                l.bottom_data_type = precision;
                l.compute_data_type = precision;
                l.top_data_type = precision;
            }
        }
        for t in &l.tops {
            top_type.insert(t.clone(), l.top_data_type);
        }
    }
    // explicit quantizers consume whatever their producer emits
    for l in &mut layers {
        if l.kind == LayerKind::Quantizer {
            if let Some(t) = l.bottoms.first().and_then(|b| top_type.get(b)) {
                l.bottom_data_type = *t;
                l.compute_data_type = *t;
            }
        }
    }

    let mut out: Vec<LayerSpec> = Vec::with_capacity(layers.len());
    let mut inserted: BTreeMap<(String, DataType), String> = BTreeMap::new();
    let mut pending: Vec<LayerSpec> = Vec::new();
    for mut l in layers {
        for b in &mut l.bottoms {
            let Some(&have) = top_type.get(b.as_str()) else { continue };
            let want = l.bottom_data_type;
            if have == want {
                continue;
            }
            let key = (b.clone(), want);
            let blob = match inserted.get(&key) {
                Some(name) => name.clone(),
                None => {
                    let short = want.short_name();
                    let name = format!("{b}_{short}");
                    let q = LayerSpec::new(&format!("{b}_to_{short}"), LayerKind::Quantizer, &[b], &[&name])
                        .with_types(have, have, want);
                    pending.push(q);
                    inserted.insert(key, name.clone());
                    name
                }
            };
            *b = blob;
        }
        // converters go right before their first consumer
        out.append(&mut pending);
        out.push(l);
    }
    GraphSpec { name: spec.name.clone(), layers: out, inspect: spec.inspect.clone() }
}
