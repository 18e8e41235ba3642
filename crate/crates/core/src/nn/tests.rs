use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// Central differences over every scalar of every parameter.
fn check<F>(p: &mut Params, build: F)
where
    F: Fn(&mut Graph, &Params) -> Var,
{
    let mut g = Graph::new();
    let loss = build(&mut g, p);
    let grads = g.backward(loss);
    let h = 1e-5;
    for id in p.ids().collect::<Vec<_>>() {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Array2::zeros(p.get(id).raw_dim()));
        for idx in 0..p.get(id).len() {
            let (r, c) = (idx / p.get(id).ncols(), idx % p.get(id).ncols());
            let orig = p.get(id)[[r, c]];
            p.get_mut(id)[[r, c]] = orig + h;
            let mut g1 = Graph::new();
            let l1 = build(&mut g1, p);
            let up = g1.scalar(l1);
            p.get_mut(id)[[r, c]] = orig - h;
            let mut g2 = Graph::new();
            let l2 = build(&mut g2, p);
            let down = g2.scalar(l2);
            p.get_mut(id)[[r, c]] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[[r, c]];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-5, "{} [{r},{c}]: analytic {an} vs fd {fd}", p.name(id));
        }
    }
}

fn raw(p: &mut Params, name: &str, r: usize, c: usize, seed: u64) -> ParamId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Unrounded values so the check exercises generic points.
    let id = p.normal(name, r, c, 0.7, &mut rng);
    p.get_mut(id).mapv_inplace(|v| v + 0.013);
    id
}

#[test]
fn elementwise_and_matmul_grads() {
    let mut p = Params::new();
    let a = raw(&mut p, "a", 3, 4, 1);
    let b = raw(&mut p, "b", 4, 2, 2);
    let c = raw(&mut p, "c", 3, 2, 3);
    let row = raw(&mut p, "row", 1, 2, 4);
    check(&mut p, |g, p| {
        let a = g.param(p, a);
        let b = g.param(p, b);
        let c = g.param(p, c);
        let row = g.param(p, row);
        let ab = g.matmul(a, b);
        let x = g.mul(ab, c);
        let x = g.add_row(x, row);
        let y = g.mul_row(x, row);
        let z = g.sub(y, c);
        let z = g.scale(z, 0.3);
        let s = g.matmul_bt(z, c);
        let s = g.gelu(s);
        g.sum(s)
    });
}

#[test]
fn softmax_normalize_and_norm_grads() {
    let mut p = Params::new();
    let a = raw(&mut p, "a", 4, 5, 5);
    let w = raw(&mut p, "w", 4, 5, 6);
    check(&mut p, |g, p| {
        let a = g.param(p, a);
        let w = g.param(p, w);
        let mut m = Array2::zeros((4, 5));
        m[[0, 0]] = f64::NEG_INFINITY;
        m[[2, 3]] = f64::NEG_INFINITY;
        let m = g.constant(m);
        let s = g.add(a, m);
        let s = g.softmax(s);
        let n = g.normalize(a, 1e-5);
        let x = g.mul(s, w);
        let x = g.add(x, n);
        let r = g.row_norm(x);
        let q = g.row_sq_norm(w);
        let l = g.row_abs_sum(x);
        let t = g.concat_rows(&[r, q, l]);
        g.mean(t)
    });
}

#[test]
fn structural_op_grads() {
    let mut p = Params::new();
    let a = raw(&mut p, "a", 5, 6, 7);
    let b = raw(&mut p, "b", 2, 6, 8);
    check(&mut p, |g, p| {
        let a = g.param(p, a);
        let b = g.param(p, b);
        let left = g.slice_cols(a, 0, 3);
        let right = g.slice_cols(a, 3, 3);
        let swapped = g.concat_cols(&[right, left]);
        let rows = g.slice_rows(swapped, 1, 3);
        let stacked = g.concat_rows(&[rows, b]);
        let picked = g.gather_rows(stacked, &[4, 0, 0, 2]);
        let sq = g.row_sq_norm(picked);
        g.sum(sq)
    });
}

#[test]
fn straight_through_routes_gradient() {
    let mut p = Params::new();
    let a = raw(&mut p, "a", 2, 3, 9);
    let mut g = Graph::new();
    let av = g.param(&p, a);
    let st = g.straight_through(av, Array2::from_elem((2, 3), 5.0));
    assert_eq!(g.value(st), &Array2::from_elem((2, 3), 5.0));
    let sq = g.row_sq_norm(st);
    let loss = g.sum(sq);
    let grads = g.backward(loss);
    assert_eq!(grads.get(a).unwrap(), &Array2::from_elem((2, 3), 10.0));
}

#[test]
fn frozen_store_has_no_gradients() {
    let mut frozen = Params::new();
    let f = frozen.filled("f", 2, 2, 1.0);
    frozen.set_trainable(false);
    let mut live = Params::new();
    let l = live.filled("l", 2, 2, 2.0);
    let mut g = Graph::new();
    let fv = g.param(&frozen, f);
    let lv = g.param(&live, l);
    let m = g.matmul(fv, lv);
    let loss = g.sum(m);
    let grads = g.backward(loss);
    assert!(grads.get(l).is_some());
    assert_eq!(grads.iter().count(), 1);
}

#[test]
fn transformer_stack_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = Params::new();
    let stack = TransformerStack::new(&mut p, "s", 1, 4, 2, 8, 0.7, &mut rng);
    let x = Array2::from_shape_fn((3, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin());
    let mut mask = Array2::zeros((3, 3));
    mask[[0, 0]] = f64::NEG_INFINITY;
    check(&mut p, |g, p| {
        let x = g.constant(x.clone());
        let (y, _) = stack.forward(g, p, x, Some(&mask));
        let w = g.constant(Array2::from_shape_fn((3, 4), |(i, j)| 0.5 + (i + 2 * j) as f64 * 0.1));
        let y = g.mul(y, w);
        let sq = g.row_sq_norm(y);
        g.mean(sq)
    });
}
