use hccm::diffcore::{finite_difference_check, io, DiffError, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights, so every output
/// coordinate contributes a distinct gradient.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, &tape.shape(out).to_vec(), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn check<F>(x: &Tensor<f64>, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, DiffError>,
{
    finite_difference_check(f, x, 1e-6).unwrap()
}

fn cases() -> ProptestConfig {
    ProptestConfig { cases: 100, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(cases())]

    #[test]
    fn matmul_and_transpose_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let x = rand_tensor(&mut rng, &[m, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[k, n], -1.0, 1.0);
        let err = check(&x, |t, x| {
            let b = t.constant(b.clone());
            let y = t.matmul(x, b)?;
            let y = t.transpose(y)?;
            project(t, y, seed)
        });
        prop_assert!(err < TOL, "{err}");
        let err = check(&b, |t, bv| {
            let a = t.constant(x.clone());
            let y = t.matmul(a, bv)?;
            project(t, y, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn elementwise_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
        let x = rand_tensor(&mut rng, &shape, 0.2, 2.0);
        let other = rand_tensor(&mut rng, &shape, 0.2, 2.0);
        let err = check(&x, |t, x| {
            let o = t.constant(other.clone());
            let a = t.add(x, o)?;
            let s = t.sub(a, x)?;
            let s = t.add(s, x)?;
            let m = t.mul(s, x)?;
            let d = t.div(m, o)?;
            let l = t.log(d)?;
            let e = t.exp(l);
            let g = t.gelu(e);
            let sg = t.sigmoid(g);
            let n = t.neg(sg);
            let sc = t.scale(n, 1.7);
            let sh = t.add_scalar(sc, 0.3);
            project(t, sh, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn piecewise_gradients_away_from_kinks(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..8);
        // keep |x| and |x - other| at least 0.1 so steps never cross a kink
        let x = Tensor::new(vec![n], (0..n).map(|i| if i % 2 == 0 { rng.gen_range(0.1..1.0) } else { rng.gen_range(-1.0..-0.1) }).collect()).unwrap();
        let other = Tensor::new(vec![n], x.data().iter().map(|v| if rng.gen() { v + 0.3 } else { v - 0.3 }).collect()).unwrap();
        let err = check(&x, |t, x| {
            let o = t.constant(other.clone());
            let a = t.abs(x);
            let mn = t.minimum(x, o)?;
            let mx = t.maximum(x, o)?;
            let s = t.add(a, mn)?;
            let s = t.add(s, mx)?;
            project(t, s, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn normalisation_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (rng.gen_range(1..4), rng.gen_range(2..6));
        let x = rand_tensor(&mut rng, &[r, c], -2.0, 2.0);
        let g = rand_tensor(&mut rng, &[c], 0.5, 1.5);
        let b = rand_tensor(&mut rng, &[c], -0.5, 0.5);
        let err = check(&x, |t, x| {
            let (gv, bv) = (t.constant(g.clone()), t.constant(b.clone()));
            let ln = t.layer_norm(x, gv, bv, 1e-5)?;
            let sm = t.softmax(ln)?;
            let lsm = t.log_softmax(x)?;
            let l2 = t.l2_normalize(x)?;
            let s = t.add(sm, lsm)?;
            let s = t.add(s, l2)?;
            project(t, s, seed)
        });
        prop_assert!(err < TOL, "{err}");
        let err = check(&g, |t, gv| {
            let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
            let ln = t.layer_norm(xv, gv, bv, 1e-5)?;
            project(t, ln, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn attention_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = rng.gen_range(1..3);
        let (b, lq, lk, w) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), heads * rng.gen_range(1..3));
        let mut mask: Vec<bool> = (0..b * lk).map(|_| rng.gen_bool(0.7)).collect();
        for bi in 0..b {
            mask[bi * lk] = true;
        }
        let q = rand_tensor(&mut rng, &[b, lq, w], -1.0, 1.0);
        let kv = rand_tensor(&mut rng, &[b, lk, w], -1.0, 1.0);
        let err = check(&q, |t, qv| {
            let k = t.constant(kv.clone());
            let y = t.attention(qv, k, k, heads, Some(&mask))?;
            project(t, y, seed)
        });
        prop_assert!(err < TOL, "{err}");
        let err = check(&kv, |t, k| {
            let qv = t.constant(q.clone());
            let y = t.attention(qv, k, k, heads, Some(&mask))?;
            project(t, y, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn indexing_and_reduction_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, l, w) = (rng.gen_range(1..3), rng.gen_range(2..4), rng.gen_range(2..5));
        let x = rand_tensor(&mut rng, &[b, l, w], -1.0, 1.0);
        let idx: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(0..b)).collect();
        let pos = rng.gen_range(0..l);
        let start = rng.gen_range(0..w - 1);
        let err = check(&x, |t, x| {
            let gathered = t.gather_rows(x, &idx)?;
            let tok = t.select_token(gathered, pos)?;
            let row = t.select_token(x, 0)?;
            let flat = t.reshape(x, &[b * l, w])?;
            let first = t.gather_rows(flat, &[0])?;
            let first = t.reshape(first, &[w])?;
            let pre = t.prepend_row(x, first)?;
            let cat = t.concat_rows(&[tok, row])?;
            let sl = t.slice_last(cat, start, 1)?;
            let sl = t.sum_last(sl)?;
            let a = project(t, sl, seed)?;
            let bsum = t.mean(pre)?;
            let csum = project(t, cat, seed + 1)?;
            let s = t.add(a, bsum)?;
            t.add(s, csum)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn matmul_matches_naive_product(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9));
        let a = rand_tensor(&mut rng, &[m, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[k, n], -1.0, 1.0);
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.matmul(av, bv).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum();
                prop_assert!((t.data(c)[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (rng.gen_range(1..6), rng.gen_range(1..9));
        let x = rand_tensor(&mut rng, &[r, c], -50.0, 50.0);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let s = t.softmax(xv).unwrap();
        let u = t.l2_normalize(xv).unwrap();
        for row in t.data(s).chunks(c) {
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for row in t.data(u).chunks(c) {
            prop_assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tensor_files_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape: Vec<usize> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..4)).collect();
        let x = rand_tensor(&mut rng, &shape, -1e6, 1e6);
        let back: Tensor<f64> = io::decode(&io::encode(&x)).unwrap();
        prop_assert_eq!(back, x.clone());
        let single: Tensor<f32> = x.cast();
        let back: Tensor<f32> = io::decode(&io::encode(&single)).unwrap();
        prop_assert_eq!(back, single);
    }
}

#[test]
fn gradients_accumulate_over_reuse() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    let y = t.mul(x, x).unwrap();
    let z = t.add(y, x).unwrap();
    let s = t.sum(z);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[3.0, 5.0]);
}

#[test]
fn backward_rejects_non_scalar_roots() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    assert!(matches!(t.backward(x), Err(DiffError::NonScalarRoot(_))));
}
