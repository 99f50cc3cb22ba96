//! Backprop against central finite differences, in f64.

mod common;

use common::{gradcheck, random_matrix, GradReport};
use gebd_core::autograd::{Graph, Var};
use gebd_core::ddmnet::{local_loss_node, LocalModel, LocalModelConfig};
use gebd_core::decoder::{
    hungarian, match_cost, set_loss_with_assignment, Decoder, DecoderConfig, LossWeights, Positional,
    WindowPrediction,
};
use gebd_core::featbank::{FeatureBank, TemporalVariant};
use gebd_core::params::ParamStore;
use gebd_core::tensor::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
/// Denominator floor: gradients far below it are compared in absolute terms.
const FLOOR: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Moves every parameter off its initial value so no gradient is zero by symmetry.
fn jitter(store: &mut ParamStore<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (r, c) = store.get(id).shape();
        let noise = random_matrix(r, c, scale, rng);
        store.get_mut(id).add_assign(&noise);
    }
}

fn check(what: &str, r: GradReport) {
    println!("{what}: {} scalars, max rel err {:.3e} at {}", r.checked, r.max_rel, r.worst);
    assert!(r.checked > 0);
    assert!(r.max_rel < TOL, "{what}: {}", r.worst);
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let (r, c) = g.shape(x);
    let w = g.input(random_matrix(r, c, 1.0, &mut rng(seed)));
    let y = g.mul(x, w);
    g.sum(y)
}

#[test]
fn primitive_ops() {
    let mut r = rng(1);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", random_matrix(4, 3, 1.0, &mut r));
    let b = store.add("b", random_matrix(3, 5, 1.0, &mut r));
    let c = store.add("c", random_matrix(4, 5, 1.0, &mut r));
    let row = store.add("row", random_matrix(1, 5, 1.0, &mut r));
    let pos = store.add("pos", Matrix::from_fn(4, 5, |i, j| 0.5 + 0.1 * (i + j) as f64));
    check(
        "primitives",
        gradcheck(&store, H, FLOOR, |g, s| {
            let (a, b, c, row, pos) = (
                g.param(s, a),
                g.param(s, b),
                g.param(s, c),
                g.param(s, row),
                g.param(s, pos),
            );
            let ab = g.matmul(a, b);
            let abt = g.matmul_t(b, true, a, true);
            let abt = g.transpose(abt);
            let x = g.add(ab, abt);
            let x = g.mul(x, c);
            let x = g.add(x, row);
            let x = g.mul(x, row);
            let sm = g.softmax(x);
            let ge = g.gelu(x);
            let sg = g.sigmoid(x);
            let ln = g.log(pos);
            let ex = g.exp(sm);
            let ab = g.abs(x);
            let cl = g.clamp(x, -0.5, 0.5);
            let nm = g.layer_norm(x, 1e-5);
            let sl = g.slice_cols(nm, 1, 3);
            let sr = g.slice_rows(ge, 1, 2);
            let cc = g.concat_cols(&[sl, sg]);
            let cr = g.concat_rows(&[sr, ab]);
            let ga = g.gather_rows(cr, &[0, 5, 5, 2]);
            let mr = g.mean_rows(ga);
            let af = g.affine(cl, 1.5, -0.25);
            let sc = g.scale(ln, 0.7);
            let sub = g.sub(ex, sc);
            let terms = [
                probe(g, cc, 10),
                probe(g, mr, 11),
                probe(g, af, 12),
                probe(g, sub, 13),
            ];
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = g.add(total, t);
            }
            total
        }),
    );
}

#[test]
fn temporal_variants_at_t5_c2_d3() {
    let mut r = rng(2);
    let clip = random_matrix(5, 2, 1.0, &mut r);
    for kernel in [1, 3, 5] {
        let mut store = ParamStore::<f64>::new();
        let v = TemporalVariant::new(&mut store, "v", 2, kernel, 3, &mut r);
        jitter(&mut store, 0.2, &mut r);
        check(
            &format!("temporal variant k={kernel}"),
            gradcheck(&store, H, FLOOR, |g, s| {
                let x = g.input(clip.clone());
                let y = v.forward(g, s, x);
                probe(g, y, 3)
            }),
        );
    }
}

#[test]
fn fused_bank() {
    let mut r = rng(3);
    let clip = vec![random_matrix(5, 2, 1.0, &mut r), random_matrix(5, 3, 1.0, &mut r)];
    let mut store = ParamStore::<f64>::new();
    let bank = FeatureBank::new(&mut store, "bank", &[2, 3], 3, 3, &mut r);
    jitter(&mut store, 0.2, &mut r);
    check(
        "feature bank",
        gradcheck(&store, H, FLOOR, |g, s| {
            let seqs = bank.build(g, s, &clip).unwrap();
            let f = bank.fuse(g, s, &seqs);
            probe(g, f, 4)
        }),
    );
}

fn tiny_local(seed: u64) -> (LocalModel, ParamStore<f64>, Vec<Matrix<f64>>) {
    let mut r = rng(seed);
    let config = LocalModelConfig {
        channels: vec![2, 3],
        n: 3,
        dim: 8,
        heads: 2,
        omega: 2,
        w: 2,
        s: 1,
    };
    let mut store = ParamStore::<f64>::new();
    let model = LocalModel::new(config, &mut store, &mut r);
    jitter(&mut store, 0.1, &mut r);
    let clip = vec![random_matrix(5, 2, 1.0, &mut r), random_matrix(5, 3, 1.0, &mut r)];
    (model, store, clip)
}

#[test]
fn local_stage_t5_d8_omega2() {
    let (model, store, clip) = tiny_local(4);
    for label in [0u8, 1] {
        check(
            &format!("local stage, label {label}"),
            gradcheck(&store, H, FLOOR, |g, s| {
                let out = model.forward(g, s, &clip).unwrap();
                local_loss_node(g, out.prob, label, 1.0)
            }),
        );
    }
}

#[test]
fn local_stage_reference_route() {
    let (model, store, clip) = tiny_local(5);
    check(
        "local stage, explicit map",
        gradcheck(&store, H, FLOOR, |g, s| {
            let out = model.forward_reference(g, s, &clip).unwrap();
            local_loss_node(g, out.prob, 1, 1.0)
        }),
    );
}

#[test]
fn decoder_and_set_loss_window8_d8_q3() {
    let mut r = rng(6);
    let config = DecoderConfig {
        dim: 8,
        heads: 2,
        layers: 2,
        num_queries: 3,
        window_len: 8,
    };
    let mut store = ParamStore::<f64>::new();
    let decoder = Decoder::new(config, &mut store, &mut r);
    jitter(&mut store, 0.1, &mut r);
    let memory = random_matrix(8, 8, 1.0, &mut r);
    let gts = [0.3, 0.7];
    let w = LossWeights { loc: 5.0, cls: 1.0 };

    // Matching is fixed at the unperturbed parameters.
    let mut g = Graph::new();
    let out = decoder.forward(&mut g, &store, &memory, Positional::On).unwrap();
    let pred = WindowPrediction::from_output(&g, &out);
    let assignment = hungarian(&match_cost(&pred, &gts, w)).unwrap();
    assert_eq!(assignment.pairs.len(), 2);

    check(
        "decoder + set loss",
        gradcheck(&store, H, FLOOR, |g, s| {
            let out = decoder.forward(g, s, &memory, Positional::On).unwrap();
            set_loss_with_assignment(g, &out, &gts, &assignment, w)
        }),
    );
}
