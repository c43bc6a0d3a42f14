//! Finite-difference gradient checking. The oracle side never touches the
//! tape's backward rules: it re-evaluates the forward pass at perturbed
//! parameter values and forms central differences. Five fixed network
//! builders jointly exercise every op in [`OP_REGISTRY`].

use std::collections::BTreeSet;

use super::graph::{conv2d, Graph, ParamSet, Tensor, OP_REGISTRY};
use super::nd::NdArray;
use super::rng::RngStream;

pub type LossBuilder = Box<dyn Fn(&Graph, &ParamSet) -> Tensor>;

pub struct NetworkCheck {
    pub name: &'static str,
    pub params: ParamSet,
    pub build: LossBuilder,
    /// 1e-4 for smooth nets; 1e-3 where relu/abs kinks could sit near a
    /// finite-difference step.
    pub tol: f64,
}

pub struct CheckOutcome {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tol: f64,
    pub ops: BTreeSet<&'static str>,
    pub param_count: usize,
}

/// Central finite differences of `loss` w.r.t. every entry of `params`.
pub fn fd_gradients(params: &ParamSet, h: f64, loss: impl Fn(&ParamSet) -> f64) -> Vec<(String, NdArray)> {
    let mut out = Vec::new();
    let mut work = params.clone();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let n = params.get(&name).numel();
        let mut g = NdArray::zeros(&params.get(&name).shape);
        for i in 0..n {
            let orig = work.get(&name).data[i];
            work.get_mut(&name).data[i] = orig + h;
            let up = loss(&work);
            work.get_mut(&name).data[i] = orig - h;
            let down = loss(&work);
            work.get_mut(&name).data[i] = orig;
            g.data[i] = (up - down) / (2.0 * h);
        }
        out.push((name, g));
    }
    out
}

/// Mixed absolute/relative error: |ad − fd| / max(|ad|, |fd|, 1).
fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0)
}

pub fn check_network(net: &NetworkCheck, h: f64) -> CheckOutcome {
    let graph = Graph::new();
    let loss_t = (net.build)(&graph, &net.params);
    let grads = graph.backward(&loss_t);
    let ops = graph.ops_used();

    let fd = fd_gradients(&net.params, h, |ps| {
        let g = Graph::new();
        (net.build)(&g, ps).scalar_value()
    });

    let mut max_err = 0.0f64;
    for (name, fd_g) in &fd {
        let ad_g = grads
            .get(name)
            .unwrap_or_else(|| panic!("no tape gradient for parameter {:?}", name));
        assert_eq!(ad_g.shape, fd_g.shape);
        for (a, f) in ad_g.data.iter().zip(&fd_g.data) {
            max_err = max_err.max(rel_err(*a, *f));
        }
    }
    CheckOutcome {
        name: net.name,
        max_rel_err: max_err,
        tol: net.tol,
        ops,
        param_count: net.params.total_elems(),
    }
}

fn rand_array(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> NdArray {
    let n: usize = shape.iter().product();
    NdArray::from_vec(shape, (0..n).map(|_| rng.uniform_range(lo, hi)).collect())
}

/// Conv stack: im2col/matmul/transpose/add_row_bias/reshape via conv2d, plus
/// spatial bias, silu, upsample, pooling, square, mean.
fn conv_net(seed: u64) -> NetworkCheck {
    let mut rng = RngStream::new(seed, 101);
    let mut ps = ParamSet::new();
    ps.insert("x", rand_array(&mut rng, &[1, 4, 4, 2], -1.0, 1.0));
    ps.insert("conv.w", rand_array(&mut rng, &[3, 18], -0.5, 0.5));
    ps.insert("conv.b", rand_array(&mut rng, &[1, 3], -0.2, 0.2));
    ps.insert("sb", rand_array(&mut rng, &[1, 3], -0.3, 0.3));
    ps.insert("head.w", rand_array(&mut rng, &[3, 2], -0.6, 0.6));
    ps.insert("head.b", rand_array(&mut rng, &[1, 2], -0.2, 0.2));
    let build: LossBuilder = Box::new(|g, ps| {
        let x = g.param("x", ps.get("x"));
        let w = g.param("conv.w", ps.get("conv.w"));
        let b = g.param("conv.b", ps.get("conv.b"));
        let sb = g.param("sb", ps.get("sb"));
        let h = conv2d(&x, &w, &b, 3, 3, 1, 1).add_spatial_bias(&sb).silu().upsample2x();
        let pooled = h.mean_spatial();
        let hw = g.param("head.w", ps.get("head.w"));
        let hb = g.param("head.b", ps.get("head.b"));
        pooled.matmul(&hw).add_row_bias(&hb).transpose().square().mean_all()
    });
    NetworkCheck { name: "conv_net", params: ps, build, tol: 1e-4 }
}

/// MLP with relu, column split/concat, softmax and logsumexp heads.
fn mlp_net(seed: u64) -> NetworkCheck {
    let mut rng = RngStream::new(seed, 102);
    let mut ps = ParamSet::new();
    ps.insert("x", rand_array(&mut rng, &[4, 6], -1.0, 1.0));
    ps.insert("w1", rand_array(&mut rng, &[6, 5], -0.7, 0.7));
    ps.insert("b1", rand_array(&mut rng, &[1, 5], 0.1, 0.4));
    ps.insert("gate", rand_array(&mut rng, &[4, 5], -1.0, 1.0));
    let build: LossBuilder = Box::new(|g, ps| {
        let x = g.param("x", ps.get("x"));
        let w1 = g.param("w1", ps.get("w1"));
        let b1 = g.param("b1", ps.get("b1"));
        let gate = g.param("gate", ps.get("gate"));
        let h = x.matmul(&w1).add_row_bias(&b1).relu();
        let left = h.slice_cols(0, 3);
        let right = h.slice_cols(3, 2);
        let joined = Tensor::concat_cols(&[&left, &right]);
        let probs = joined.softmax_rows().mul(&gate);
        let lse = joined.logsumexp_rows();
        let diff = lse.sub(&probs.sum_rows()).scale(0.7);
        diff.sum_all()
    });
    NetworkCheck { name: "mlp_net", params: ps, build, tol: 1e-3 }
}

/// Normalization and similarity: l2 norms, cosine rows, abs distances.
fn metric_net(seed: u64) -> NetworkCheck {
    let mut rng = RngStream::new(seed, 103);
    let mut ps = ParamSet::new();
    ps.insert("a", rand_array(&mut rng, &[3, 4], 0.2, 1.2));
    ps.insert("b", rand_array(&mut rng, &[3, 4], -1.2, -0.2));
    let build: LossBuilder = Box::new(|g, ps| {
        let a = g.param("a", ps.get("a"));
        let b = g.param("b", ps.get("b"));
        let an = a.l2_normalize_rows();
        let cs = an.cosine_sim_rows(&b);
        let norms = b.l2_norm_rows();
        let dist = a.sub(&b).abs().sum_rows();
        cs.add(&norms).add(&dist).add_scalar(0.5).mean_all()
    });
    NetworkCheck { name: "metric_net", params: ps, build, tol: 1e-3 }
}

/// Transmittance-style chain: softplus densities, exclusive cumsum, exp,
/// sigmoid gates, per-row rescaling.
fn quadrature_net(seed: u64) -> NetworkCheck {
    let mut rng = RngStream::new(seed, 104);
    let mut ps = ParamSet::new();
    ps.insert("sig", rand_array(&mut rng, &[2, 5], -1.0, 1.5));
    ps.insert("gate", rand_array(&mut rng, &[2, 5], -1.0, 1.0));
    ps.insert("c", rand_array(&mut rng, &[2, 5], -0.8, 0.8));
    let build: LossBuilder = Box::new(|g, ps| {
        let sig = g.param("sig", ps.get("sig"));
        let gate = g.param("gate", ps.get("gate"));
        let c = g.param("c", ps.get("c"));
        let sd = sig.softplus().mul(&gate.sigmoid());
        let transmit = sd.cumsum_excl_rows().scale(-1.0).exp();
        let alpha = sd.scale(-1.0).exp().scale(-1.0).add_scalar(1.0);
        let w = transmit.mul(&alpha);
        let mixed = w.mul(&c.exp());
        let per_ray = mixed.sum_rows();
        w.scale_rows(&per_ray).mean_all()
    });
    NetworkCheck { name: "quadrature_net", params: ps, build, tol: 1e-4 }
}

/// Two-layer perceptron, ~64 learnable values, smooth activation.
fn perceptron_net(seed: u64) -> NetworkCheck {
    let mut rng = RngStream::new(seed, 105);
    let mut ps = ParamSet::new();
    ps.insert("w1", rand_array(&mut rng, &[4, 6], -0.8, 0.8));
    ps.insert("b1", rand_array(&mut rng, &[1, 6], -0.2, 0.2));
    ps.insert("w2", rand_array(&mut rng, &[6, 5], -0.8, 0.8));
    ps.insert("b2", rand_array(&mut rng, &[1, 5], -0.2, 0.2));
    let mut input_rng = RngStream::new(seed, 106);
    let x_const = rand_array(&mut input_rng, &[2, 4], -1.0, 1.0);
    let build: LossBuilder = Box::new(move |g, ps| {
        let x = g.constant(&x_const);
        let w1 = g.param("w1", ps.get("w1"));
        let b1 = g.param("b1", ps.get("b1"));
        let w2 = g.param("w2", ps.get("w2"));
        let b2 = g.param("b2", ps.get("b2"));
        x.matmul(&w1).add_row_bias(&b1).silu().matmul(&w2).add_row_bias(&b2).square().mean_all()
    });
    NetworkCheck { name: "perceptron_net", params: ps, build, tol: 1e-4 }
}

pub fn standard_networks(seed: u64) -> Vec<NetworkCheck> {
    vec![conv_net(seed), mlp_net(seed), metric_net(seed), quadrature_net(seed), perceptron_net(seed)]
}

/// Run the full suite; panics if coverage misses any registered op.
pub fn run_all_checks(seed: u64, h: f64) -> Vec<CheckOutcome> {
    let outcomes: Vec<CheckOutcome> = standard_networks(seed).iter().map(|n| check_network(n, h)).collect();
    let mut covered: BTreeSet<&'static str> = BTreeSet::new();
    for o in &outcomes {
        covered.extend(o.ops.iter());
    }
    let missing: Vec<&&str> = OP_REGISTRY.iter().filter(|op| !covered.contains(*op)).collect();
    assert!(missing.is_empty(), "gradient-check networks miss ops: {:?}", missing);
    outcomes
}
