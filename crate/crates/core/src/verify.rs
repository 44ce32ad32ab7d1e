//! Finite-difference gradient suite over every graph operation and a small
//! full network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data;
use crate::error::Result;
use crate::lsu;
use crate::model::build_variant;
use crate::tensor::{grad_check, Fault, Graph, NodeId, OpKind, ParamSet, Tensor};
use crate::train;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub worst: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.worst <= GRADCHECK_TOLERANCE
    }
}

fn random(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    // Keep values away from zero so ReLU kinks stay out of the stencil.
    Tensor::from_fn(dims, |_, _, _, _| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

type Builder = fn(&mut Graph<f64>, &mut ChaCha8Rng) -> Result<NodeId>;

/// `sum(sigmoid(x))`: a scalar whose upstream gradient differs per element.
fn reduce(g: &mut Graph<f64>, x: NodeId) -> Result<NodeId> {
    let s = g.sigmoid(x)?;
    g.sum(s)
}

fn case_conv(g: &mut Graph<f64>, _: &mut ChaCha8Rng) -> Result<NodeId> {
    let (x, k, b) = (g.param("x")?, g.param("k")?, g.param("b")?);
    let y = g.conv2d(x, k, b, 1, 1)?;
    reduce(g, y)
}

fn case_conv_strided(g: &mut Graph<f64>, _: &mut ChaCha8Rng) -> Result<NodeId> {
    let (x, k, b) = (g.param("x")?, g.param("k")?, g.param("b")?);
    let y = g.conv2d(x, k, b, 2, 0)?;
    reduce(g, y)
}

fn unary(g: &mut Graph<f64>, f: impl Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>) -> Result<NodeId> {
    let x = g.param("x")?;
    let y = f(g, x)?;
    reduce(g, y)
}

fn cases() -> Vec<(&'static str, Vec<(&'static str, [usize; 4])>, Builder)> {
    vec![
        ("conv2d", vec![("x", [2, 3, 5, 6]), ("k", [4, 3, 3, 3]), ("b", [4, 1, 1, 1])], case_conv as Builder),
        ("conv2d_strided", vec![("x", [1, 2, 6, 6]), ("k", [3, 2, 2, 2]), ("b", [3, 1, 1, 1])], case_conv_strided),
        ("relu", vec![("x", [1, 2, 4, 4])], |g, _| unary(g, |g, x| g.relu(x))),
        ("sigmoid", vec![("x", [1, 2, 4, 4])], |g, _| unary(g, |g, x| g.sigmoid(x))),
        ("maxpool2", vec![("x", [1, 2, 6, 4])], |g, _| unary(g, |g, x| g.maxpool2(x))),
        ("upsample_bilinear", vec![("x", [1, 2, 3, 4])], |g, _| unary(g, |g, x| g.upsample_bilinear(x, 2))),
        ("upsample_bilinear_x4", vec![("x", [1, 1, 3, 3])], |g, _| unary(g, |g, x| g.upsample_bilinear(x, 4))),
        ("upsample_learned", vec![("x", [1, 2, 3, 3]), ("k", [2, 1, 4, 4])], |g, _| {
            let (x, k) = (g.param("x")?, g.param("k")?);
            let y = g.upsample_learned(x, k, 2)?;
            reduce(g, y)
        }),
        ("concat", vec![("a", [1, 1, 3, 3]), ("b", [1, 2, 3, 3])], |g, _| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            let c = g.concat(&[a, b])?;
            let s = g.scale(c, 0.7)?;
            reduce(g, s)
        }),
        ("slice", vec![("x", [1, 3, 3, 3])], |g, _| {
            let x = g.param("x")?;
            let parts = g.slice(x, &[1, 2])?;
            let a = g.scale(parts[1], 1.3)?;
            let l0 = reduce(g, parts[0])?;
            let l1 = reduce(g, a)?;
            g.add(&[l0, l1])
        }),
        ("sum", vec![("x", [1, 2, 3, 3])], |g, _| {
            let x = g.param("x")?;
            let s = g.sum(x)?;
            reduce(g, s)
        }),
        ("scale", vec![("x", [1, 2, 3, 3])], |g, _| unary(g, |g, x| g.scale(x, -1.7))),
        ("add", vec![("a", [1, 2, 3, 3]), ("b", [1, 2, 3, 3])], |g, _| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            let s = g.add(&[a, b, a])?;
            reduce(g, s)
        }),
        ("balanced_bce", vec![("x", [1, 1, 5, 5])], |g, rng| {
            let x = g.param("x")?;
            let target = Tensor::from_fn([1, 1, 5, 5], |_, _, _, _| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
            g.balanced_bce(x, target)
        }),
        ("lsu", vec![("a", [1, 2, 4, 4]), ("b", [1, 1, 4, 4])], |g, rng| {
            let p = lsu::LsuParams::<f64>::init(vec![2, 1], vec![1, 1], rng)?;
            p.insert_into(g.params_mut(), "u");
            // Non-zero bias so its gradient is exercised away from the origin.
            g.params_mut().get_mut(&lsu::bias_name("u")).unwrap().data_mut().fill(0.3);
            let (a, b) = (g.param("a")?, g.param("b")?);
            let outs = lsu::lsu_node(g, "u", &[a, b], &[1, 1])?;
            let l0 = reduce(g, outs[0])?;
            let s = g.scale(outs[1], 2.0)?;
            let l1 = reduce(g, s)?;
            g.add(&[l0, l1])
        }),
    ]
}

/// Runs every case in 64-bit. `fault` corrupts one backward rule, for the
/// negative control.
pub fn gradcheck_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (name, shapes, build) in cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (pname, dims) in shapes {
            params.insert(pname, random(dims, &mut rng));
        }
        let mut g = Graph::new(params);
        g.set_fault(fault.map(|op| Fault { op }));
        let loss = build(&mut g, &mut rng)?;
        let report = grad_check(&mut g, loss, GRADCHECK_EPSILON)?;
        out.push(SuiteEntry {
            name: name.to_string(),
            worst: report.worst(),
        });
    }
    out.push(SuiteEntry {
        name: "lsn3_network".into(),
        worst: network_check(seed, fault)?,
    });
    Ok(out)
}

/// Full multi-head loss of a narrow LSN_3 on a 32x32 synthetic sample.
pub fn network_check(seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let spec = build_variant(3, 0.125)?;
    let sample = data::gen_sample(seed, 32)?.sample;
    let mut params = spec.init_params::<f64>(seed);
    // Spread the zero-initialised biases so no unit sits exactly on a kink.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = params.names().filter(|n| n.ends_with(".bias")).map(str::to_string).collect();
    for n in names {
        for v in params.get_mut(&n).unwrap().data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    let (mut g, total, _) = train::loss_graph(&spec, params, &sample.image_tensor(), &sample.gt_tensor(), &[])?;
    if let Some(op) = fault {
        g.set_fault(Some(Fault { op }));
    }
    Ok(grad_check(&mut g, total, GRADCHECK_EPSILON)?.worst())
}
