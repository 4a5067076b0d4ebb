//! Parameter-set shapes and filler initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{element_count, Tensor};

use super::spec::{Filler, GraphSpec, LayerKind};
use super::validate::{validate, ValidGraph};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub filler: Filler,
    /// Index of the owning top-level layer.
    pub layer: usize,
}

fn nested(prefix: &str, spec: &GraphSpec, layer: usize, out: &mut Vec<ParamSpec>) -> Result<ValidGraph> {
    let g = validate(spec).into_result()?;
    for mut p in param_specs(&g)? {
        p.name = format!("{prefix}.{}", p.name);
        p.layer = layer;
        out.push(p);
    }
    Ok(g)
}

/// Every parameter set of `g` with its shape, in layer order.
pub fn param_specs(g: &ValidGraph) -> Result<Vec<ParamSpec>> {
    let mut out = Vec::new();
    for (i, l) in g.spec.layers.iter().enumerate() {
        let bottom = l.bottoms.first().and_then(|b| g.shapes.get(b));
        let mut push = |suffix: &str, shape: Vec<usize>, filler: &Filler| {
            out.push(ParamSpec { name: format!("{}.{suffix}", l.name), shape, filler: filler.clone(), layer: i });
        };
        match l.kind {
            LayerKind::Conv => {
                let cp = l.convolution_param.as_ref().expect("validated");
                let c = bottom.expect("validated")[1];
                let k = &cp.conv;
                push("weight", vec![k.out_channels, c / k.groups, k.kernel_h, k.kernel_w], &cp.weight_filler);
                if cp.bias_term {
                    push("bias", vec![k.out_channels], &cp.bias_filler);
                }
            }
            LayerKind::InnerProduct => {
                let ip = l.inner_product_param.as_ref().expect("validated");
                let k: usize = bottom.expect("validated")[1..].iter().product();
                push("weight", vec![k, ip.num_output], &ip.weight_filler);
                if ip.bias_term {
                    push("bias", vec![ip.num_output], &ip.bias_filler);
                }
            }
            LayerKind::Moe => {
                let mp = l.moe_param.as_ref().expect("validated");
                let gating = nested(&format!("{}.gating", l.name), &mp.gating_net, i, &mut out)?;
                for e in 0..mp.n_experts {
                    nested(&format!("{}.expert{e}", l.name), &mp.expert_net, i, &mut out)?;
                }
                let d = gating.shapes[&gating.outputs()[0]][1];
                let n = mp.n_experts;
                for (w, shape) in [("w_a", vec![n, d]), ("w_b", vec![n, d]), ("w_c", vec![n])] {
                    out.push(ParamSpec {
                        name: format!("{}.{w}", l.name),
                        shape,
                        filler: mp.gate_filler.clone(),
                        layer: i,
                    });
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// FNV-1a, used to give every parameter set its own random stream.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// FP32 tensor of `shape` drawn from `filler`. Deterministic in
/// `(seed, name)`.
pub fn fill(filler: &Filler, shape: &[usize], name: &str, seed: u64) -> Result<Tensor> {
    let n = element_count(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
    let values: Vec<f32> = match *filler {
        Filler::Constant { value } => vec![value; n],
        Filler::Gaussian { mean, std } => {
            let d = Normal::new(mean, std).map_err(|e| Error::InvalidParam(format!("{name}: gaussian filler: {e}")))?;
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
        Filler::Uniform { min, max } => {
            if !(min < max) {
                return Err(Error::InvalidParam(format!("{name}: uniform filler needs min < max")));
            }
            (0..n).map(|_| rng.gen_range(min..max)).collect()
        }
    };
    Tensor::from_f32(shape, &values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn celsius_params() {
        let g = validate(&GraphSpec::from_json(include_str!("../../testdata/celsius.json")).unwrap()).into_result().unwrap();
        let ps = param_specs(&g).unwrap();
        assert_eq!(ps.len(), 2);
        assert_eq!((ps[0].name.as_str(), ps[0].shape.as_slice()), ("neuron.weight", &[1usize, 1][..]));
        assert_eq!(fill(&ps[0].filler, &ps[0].shape, &ps[0].name, 0).unwrap().to_f32_vec(), vec![1.8]);
        assert_eq!(fill(&ps[1].filler, &ps[1].shape, &ps[1].name, 0).unwrap().to_f32_vec(), vec![32.0]);
    }

    #[test]
    fn random_fillers_are_seeded_per_name() {
        let f = Filler::Gaussian { mean: 0.0, std: 1.0 };
        let a = fill(&f, &[16], "a", 7).unwrap();
        assert_eq!(a, fill(&f, &[16], "a", 7).unwrap());
        assert_ne!(a, fill(&f, &[16], "b", 7).unwrap());
        assert_ne!(a, fill(&f, &[16], "a", 8).unwrap());
        let u = fill(&Filler::Uniform { min: 2.0, max: 3.0 }, &[100], "u", 1).unwrap().to_f32_vec();
        assert!(u.iter().all(|v| (2.0..3.0).contains(v)));
        assert!(fill(&Filler::Uniform { min: 1.0, max: 1.0 }, &[1], "u", 1).is_err());
    }
}
