use hrgen::attention::{
    attend_spatial, fuse_views, init_fusion, init_multi_query, init_spatial_attention, multi_query_attention,
    query_set, spatial_scores, stack_values,
};
use hrgen::numerics::{check_gradients, Graph, NodeId, ParameterStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn node(g: &mut Graph, shape: &[usize], data: Vec<f64>) -> NodeId {
    g.constant(Tensor::new(shape, data).unwrap())
}

fn weighted(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let n: usize = g.shape(x).iter().product();
    let w = Tensor::new(g.shape(x), rand_vec(&mut rng(seed), n)).unwrap();
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

// ---- spatial ------------------------------------------------------------

fn spatial_store(seed: u64, d: usize, q: usize) -> ParameterStore {
    let mut s = ParameterStore::new();
    init_spatial_attention(&mut s, "sp", d, q, 4, &mut rng(seed)).unwrap();
    s
}

#[test]
fn identical_cells_give_uniform_weights() {
    let s = spatial_store(1, 3, 2);
    let mut g = Graph::new();
    let cell = [0.3, -0.7, 1.1];
    let map = node(&mut g, &[3, 3, 3], cell.repeat(9));
    let cond = node(&mut g, &[2], vec![0.5, -2.0]);
    let att = spatial_scores(&mut g, &s, "sp", map, cond).unwrap();
    assert_eq!(g.shape(att.weights), &[3, 3]);
    assert!(g.data(att.weights).iter().all(|&w| (w - 1.0 / 9.0).abs() < 1e-15));
}

#[test]
fn spatial_weights_are_softmax_of_scores() {
    let s = spatial_store(2, 3, 2);
    let mut r = rng(3);
    let mut g = Graph::new();
    let map = node(&mut g, &[4, 4, 3], rand_vec(&mut r, 48));
    let cond = node(&mut g, &[2], rand_vec(&mut r, 2));
    let att = spatial_scores(&mut g, &s, "sp", map, cond).unwrap();
    let scores = g.data(att.scores).to_vec();
    let weights = g.data(att.weights);
    // Shifting every score by a constant must not move the softmax.
    for shift in [0.0, 17.0, -250.0] {
        let m = scores.iter().map(|x| x + shift).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|x| (x + shift - m).exp()).sum();
        let direct: Vec<f64> = scores.iter().map(|x| (x + shift - m).exp() / z).collect();
        assert!(close(weights, &direct, 1e-14));
    }
    assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(weights.iter().all(|&w| w >= 0.0));
}

#[test]
fn spatial_scores_match_direct_formula() {
    let (d, q, a) = (3, 2, 4);
    let s = spatial_store(4, d, q);
    let mut r = rng(5);
    let map = rand_vec(&mut r, 4 * d);
    let cond = rand_vec(&mut r, q);
    let mut g = Graph::new();
    let m = node(&mut g, &[2, 2, d], map.clone());
    let c = node(&mut g, &[q], cond.clone());
    let att = spatial_scores(&mut g, &s, "sp", m, c).unwrap();
    let (wv, wc, wa) = (
        s.get("sp.wv").unwrap().data(),
        s.get("sp.wc").unwrap().data(),
        s.get("sp.wa").unwrap().data(),
    );
    for cell in 0..4 {
        let mut score = 0.0;
        for h in 0..a {
            let mut pre = 0.0;
            for j in 0..d {
                pre += wv[h * d + j] * map[cell * d + j];
            }
            for j in 0..q {
                pre += wc[h * q + j] * cond[j];
            }
            score += wa[h] * pre.tanh();
        }
        assert!((g.data(att.scores)[cell] - score).abs() < 1e-12);
    }
}

#[test]
fn spatial_gradients_match_finite_differences() {
    let s = spatial_store(6, 3, 2);
    let mut r = rng(7);
    let map = rand_vec(&mut r, 27);
    let cond = rand_vec(&mut r, 2);
    let report = check_gradients(
        &s,
        |g, st| {
            let m = node(g, &[3, 3, 3], map.clone());
            let c = node(g, &[2], cond.clone());
            let att = spatial_scores(g, st, "sp", m, c)?;
            let v = attend_spatial(g, m, att.weights)?;
            Ok(weighted(g, v, 8))
        },
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
    assert!(report.max_abs_grad > 0.0);
}

#[test]
fn one_hot_weights_pick_a_cell() {
    let mut r = rng(9);
    let data = rand_vec(&mut r, 2 * 2 * 3);
    let mut g = Graph::new();
    let map = node(&mut g, &[2, 2, 3], data.clone());
    for cell in 0..4 {
        let mut w = vec![0.0; 4];
        w[cell] = 1.0;
        let w = node(&mut g, &[2, 2], w);
        let v = attend_spatial(&mut g, map, w).unwrap();
        assert_eq!(g.data(v), &data[cell * 3..cell * 3 + 3]);
    }
}

#[test]
fn constant_map_ignores_weights() {
    let mut g = Graph::new();
    let map = node(&mut g, &[2, 2, 2], [0.25, -4.0].repeat(4));
    let w = node(&mut g, &[2, 2], vec![0.1, 0.2, 0.3, 0.4]);
    let v = attend_spatial(&mut g, map, w).unwrap();
    assert!(close(g.data(v), &[0.25, -4.0], 1e-15));
}

#[test]
fn attend_spatial_matches_double_loop() {
    let mut r = rng(10);
    let (k, d) = (4, 5);
    let map = rand_vec(&mut r, k * k * d);
    let mut alpha: Vec<f64> = (0..k * k).map(|_| r.random_range(0.0..1.0)).collect();
    let z: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|a| *a /= z);
    let mut want = vec![0.0; d];
    for x in 0..k {
        for y in 0..k {
            for c in 0..d {
                want[c] += alpha[x * k + y] * map[(x * k + y) * d + c];
            }
        }
    }
    let mut g = Graph::new();
    let m = node(&mut g, &[k, k, d], map);
    let w = node(&mut g, &[k, k], alpha);
    let v = attend_spatial(&mut g, m, w).unwrap();
    assert!(close(g.data(v), &want, 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn attend_spatial_is_linear_in_the_map(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let m1 = rand_vec(&mut r, 18);
        let m2 = rand_vec(&mut r, 18);
        let alpha = rand_vec(&mut r, 9);
        let mut g = Graph::new();
        let w = node(&mut g, &[3, 3], alpha);
        let combo: Vec<f64> = m1.iter().zip(&m2).map(|(x, y)| a * x + b * y).collect();
        let n1 = node(&mut g, &[3, 3, 2], m1);
        let n2 = node(&mut g, &[3, 3, 2], m2);
        let nc = node(&mut g, &[3, 3, 2], combo);
        let (v1, v2, vc) = (
            attend_spatial(&mut g, n1, w).unwrap(),
            attend_spatial(&mut g, n2, w).unwrap(),
            attend_spatial(&mut g, nc, w).unwrap(),
        );
        let sup: Vec<f64> = g.data(v1).iter().zip(g.data(v2)).map(|(x, y)| a * x + b * y).collect();
        prop_assert!(close(g.data(vc), &sup, 1e-12));
    }
}

// ---- fusion -------------------------------------------------------------

#[test]
fn single_view_identity_fusion_passes_through() {
    let mut s = ParameterStore::new();
    s.insert("wf", Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap())
        .unwrap();
    let mut g = Graph::new();
    let v = node(&mut g, &[3], vec![1.5, -2.0, 0.25]);
    let out = fuse_views(&mut g, &s, "wf", &[v]).unwrap();
    assert_eq!(g.data(out), &[1.5, -2.0, 0.25]);
}

#[test]
fn fusion_of_zeros_is_zero_and_count_is_checked() {
    let mut s = ParameterStore::new();
    init_fusion(&mut s, "wf", 2, 3, &mut rng(11)).unwrap();
    let mut g = Graph::new();
    let z = node(&mut g, &[3], vec![0.0; 3]);
    let out = fuse_views(&mut g, &s, "wf", &[z, z]).unwrap();
    assert_eq!(g.data(out), &[0.0; 3]);
    assert!(fuse_views(&mut g, &s, "wf", &[z]).is_err());
    assert!(fuse_views(&mut g, &s, "wf", &[z, z, z]).is_err());
}

#[test]
fn fusion_gradients_match_finite_differences() {
    let mut s = ParameterStore::new();
    init_fusion(&mut s, "wf", 2, 3, &mut rng(12)).unwrap();
    let mut r = rng(13);
    let (a, b) = (rand_vec(&mut r, 3), rand_vec(&mut r, 3));
    let report = check_gradients(
        &s,
        |g, st| {
            let x = node(g, &[3], a.clone());
            let y = node(g, &[3], b.clone());
            let out = fuse_views(g, st, "wf", &[x, y])?;
            Ok(weighted(g, out, 14))
        },
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

// ---- multi-query ----------------------------------------------------------

struct Mq {
    store: ParameterStore,
    d: usize,
    q: usize,
}

fn mq(seed: u64, d: usize, q: usize) -> Mq {
    let mut store = ParameterStore::new();
    init_multi_query(&mut store, "mq", d, q, &mut rng(seed)).unwrap();
    Mq { store, d, q }
}

impl Mq {
    fn run(&self, queries: &[f64], anchor: &[f64], values: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let qn = node(&mut g, &[self.q, self.d], queries.to_vec());
        let an = node(&mut g, &[self.d], anchor.to_vec());
        let vn = stack_values(&mut g, values).unwrap();
        let out = multi_query_attention(&mut g, &self.store, "mq", qn, an, vn).unwrap();
        (g.data(out.output).to_vec(), g.data(out.weights).to_vec())
    }

    fn mat(&self, name: &str) -> &[f64] {
        self.store.get(&format!("mq.{name}")).unwrap().data()
    }

    /// Row vector times a `[rows, cols]` matrix.
    fn vm(v: &[f64], m: &[f64], cols: usize) -> Vec<f64> {
        (0..cols).map(|c| v.iter().enumerate().map(|(r, x)| x * m[r * cols + c]).sum()).collect()
    }

    /// The additive-key formula written out with plain loops.
    fn oracle(&self, queries: &[f64], anchor: &[f64], values: &[Vec<f64>]) -> Vec<f64> {
        let d = self.d;
        let keys: Vec<Vec<f64>> = values
            .iter()
            .map(|v| {
                let shifted: Vec<f64> = v.iter().zip(anchor).map(|(a, b)| a + b).collect();
                Self::vm(&shifted, self.mat("wk"), d)
            })
            .collect();
        let projected: Vec<Vec<f64>> = values.iter().map(|v| Self::vm(v, self.mat("wv"), d)).collect();
        let mut concat = Vec::new();
        for qi in queries.chunks(d) {
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| qi.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..d {
                concat.push(e.iter().zip(&projected).map(|(w, v)| w / z * v[c]).sum::<f64>());
            }
        }
        Self::vm(&concat, self.mat("wo"), d)
    }
}

#[test]
fn multi_query_matches_direct_formula() {
    let m = mq(15, 3, 2);
    let mut r = rng(16);
    for _ in 0..10 {
        let queries = rand_vec(&mut r, 6);
        let anchor = rand_vec(&mut r, 3);
        let values: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut r, 3)).collect();
        let (got, _) = m.run(&queries, &anchor, &values);
        assert!(close(&got, &m.oracle(&queries, &anchor, &values), 1e-10));
    }
}

#[test]
fn single_value_gets_all_the_weight() {
    let m = mq(17, 3, 4);
    let mut r = rng(18);
    let v = rand_vec(&mut r, 3);
    let (out, weights) = m.run(&rand_vec(&mut r, 12), &rand_vec(&mut r, 3), &[v.clone()]);
    assert_eq!(weights, vec![1.0; 4]);
    // Every attended row is V_1, so the output is [V_1; V_1; V_1; V_1]·W^O.
    let projected = Mq::vm(&v, m.mat("wv"), 3);
    let want = Mq::vm(&projected.repeat(4), m.mat("wo"), 3);
    assert!(close(&out, &want, 1e-12));
}

#[test]
fn zero_queries_attend_uniformly() {
    let m = mq(19, 3, 2);
    let mut r = rng(20);
    let values: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut r, 3)).collect();
    let (out, weights) = m.run(&[0.0; 6], &rand_vec(&mut r, 3), &values);
    assert!(weights.iter().all(|&w| (w - 0.25).abs() < 1e-15));
    let projected: Vec<Vec<f64>> = values.iter().map(|v| Mq::vm(v, m.mat("wv"), 3)).collect();
    let mean: Vec<f64> = (0..3).map(|c| projected.iter().map(|p| p[c]).sum::<f64>() / 4.0).collect();
    assert!(close(&out, &Mq::vm(&mean.repeat(2), m.mat("wo"), 3), 1e-12));
}

#[test]
fn identical_values_make_weights_irrelevant() {
    let m = mq(21, 3, 2);
    let mut r = rng(22);
    let v = rand_vec(&mut r, 3);
    let (a, _) = m.run(&rand_vec(&mut r, 6), &rand_vec(&mut r, 3), &[v.clone(), v.clone(), v.clone()]);
    let (b, _) = m.run(&rand_vec(&mut r, 6), &rand_vec(&mut r, 3), &[v]);
    assert!(close(&a, &b, 1e-12));
}

#[test]
fn multi_query_rejects_empty_values() {
    let mut g = Graph::new();
    assert!(stack_values(&mut g, &[]).is_err());
}

#[test]
fn multi_query_gradients_match_finite_differences() {
    let m = mq(23, 3, 2);
    let mut r = rng(24);
    let queries = rand_vec(&mut r, 6);
    let anchor = rand_vec(&mut r, 3);
    let values: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut r, 3)).collect();
    let report = check_gradients(
        &m.store,
        |g, st| {
            let qn = node(g, &[2, 3], queries.clone());
            let an = node(g, &[3], anchor.clone());
            let vn = stack_values(g, &values)?;
            let out = multi_query_attention(g, st, "mq", qn, an, vn)?;
            Ok(weighted(g, out.output, 25))
        },
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

#[test]
fn query_set_pads_keywords_with_zero_rows() {
    let mut g = Graph::new();
    let diseases = node(&mut g, &[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
    let q = query_set(&mut g, &[vec![1.0, 2.0]], 3, diseases).unwrap();
    assert_eq!(g.shape(q), &[5, 2]);
    assert_eq!(g.data(q), &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 5.0, 6.0, 7.0, 8.0]);
    assert!(query_set(&mut g, &vec![vec![1.0, 2.0]; 4], 3, diseases).is_err());
    assert!(query_set(&mut g, &[vec![1.0]], 3, diseases).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn permuting_values_leaves_output_unchanged(seed in any::<u64>(), n in 2usize..6) {
        let m = mq(26, 3, 2);
        let mut r = rng(seed);
        let queries = rand_vec(&mut r, 6);
        let anchor = rand_vec(&mut r, 3);
        let values: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut r, 3)).collect();
        let mut reversed = values.clone();
        reversed.reverse();
        let (a, _) = m.run(&queries, &anchor, &values);
        let (b, _) = m.run(&queries, &anchor, &reversed);
        prop_assert!(close(&a, &b, 1e-12));
    }

    // Moving the anchor adds the same vector to every key, which shifts all
    // logits of a query by one constant; the softmax absorbs it.
    #[test]
    fn common_logit_shift_per_query_is_absorbed(seed in any::<u64>()) {
        let m = mq(27, 3, 2);
        let mut r = rng(seed);
        let queries = rand_vec(&mut r, 6);
        let values: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut r, 3)).collect();
        let (a, wa) = m.run(&queries, &rand_vec(&mut r, 3), &values);
        let (b, wb) = m.run(&queries, &rand_vec(&mut r, 3), &values);
        prop_assert!(close(&a, &b, 1e-10));
        prop_assert!(close(&wa, &wb, 1e-10));
        for row in wa.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
