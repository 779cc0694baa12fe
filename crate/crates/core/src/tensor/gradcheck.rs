use super::{Tape, Tensor, Var};
use crate::error::{contract, Result};

/// Compares the tape's gradient of `f` at `x` against central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return contract(format!("finite-difference step {h} outside [1e-7, 1e-3]"));
    }
    let eval = |data: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let probe = Tensor::new(x.shape().to_vec(), data.to_vec())?;
        let v = tape.leaf(&probe, false);
        let out = f(&mut tape, v)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x, true);
    let out = f(&mut tape, v)?;
    scalar(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut probe = x.data().to_vec();
    let mut worst = 0.0f64;
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = eval(&probe)?;
        probe[i] = orig - h;
        let down = eval(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return contract(format!("grad_check needs a scalar function, got shape {:?}", t.shape()));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let f = |t: &mut Tape, v: Var| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        };
        let mut tape = Tape::new();
        let v = tape.leaf(&x, true);
        let out = f(&mut tape, v).unwrap();
        assert_eq!(tape.backward(out).unwrap().get(v).unwrap(), &[2.0, 4.0]);
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let f = |t: &mut Tape, _v: Var| Ok(t.constant(&Tensor::scalar(4.0)));
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|_, v| Ok(v), &x, 1e-5).is_err());
        assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 1.0).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let err = grad_check(
            |t, v| {
                let bv = t.constant(&b);
                let c = t.matmul(v, bv)?;
                Ok(t.sum(c))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(
            |t, v| {
                let av = t.constant(&a);
                let c = t.matmul(av, v)?;
                let sq = t.mul(c, c)?;
                Ok(t.sum(sq))
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    /// Every differentiable op, checked through a weighted sum so that no
    /// gradient collapses to a constant.
    #[test]
    fn all_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random(&[4, 4], &mut rng);
        let check = |name: &str, x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Result<Var>| {
            let err = grad_check(f, x, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        };
        let x = random(&[4, 4], &mut rng);
        let weighted = |t: &mut Tape, y: Var| -> Result<Var> {
            let wv = t.constant(&w);
            let p = t.mul(y, wv)?;
            Ok(t.sum(p))
        };
        check("gelu", &x, &|t, v| {
            let y = t.gelu(v);
            weighted(t, y)
        });
        check("softmax", &x, &|t, v| {
            let y = t.softmax_rows(v);
            weighted(t, y)
        });
        let gamma = random(&[4], &mut rng);
        let beta = random(&[4], &mut rng);
        check("layer_norm x", &x, &|t, v| {
            let g = t.constant(&gamma);
            let b = t.constant(&beta);
            let y = t.layer_norm(v, g, b)?;
            weighted(t, y)
        });
        check("layer_norm gamma", &gamma, &|t, v| {
            let xv = t.constant(&x);
            let b = t.constant(&beta);
            let y = t.layer_norm(xv, v, b)?;
            weighted(t, y)
        });
        check("add_bias", &beta, &|t, v| {
            let xv = t.constant(&x);
            let y = t.add_bias(xv, v)?;
            let y = t.gelu(y);
            weighted(t, y)
        });
        check("gather", &x, &|t, v| {
            let y = t.gather(v, &[3, 0, 3, 1])?;
            let y = t.gelu(y);
            weighted(t, y)
        });
        check("select_rows", &x, &|t, v| {
            let y = t.select_rows(v, &[2, 0])?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        });
        check("slice", &x, &|t, v| {
            let y = t.slice(v, 3, &[2, 4])?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        });
        check("dropout", &x, &|t, v| {
            let mask = (0..16).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();
            let y = t.dropout(v, mask)?;
            weighted(t, y)
        });
        // Two samples of length 2, two heads of width 2.
        let mask = [true, true, true, false];
        check("attention q", &x, &|t, v| {
            let k = t.constant(&w);
            let p = t.attention_probs(v, k, &mask, 2, 2)?;
            let vv = t.constant(&w);
            let c = t.attention_context(p, vv, 2, 2)?;
            weighted(t, c)
        });
        check("attention k", &x, &|t, v| {
            let q = t.constant(&w);
            let p = t.attention_probs(q, v, &mask, 2, 2)?;
            let y = t.gelu(p);
            Ok(t.sum(y))
        });
        check("attention v", &x, &|t, v| {
            let q = t.constant(&w);
            let p = t.attention_probs(q, q, &mask, 2, 2)?;
            let c = t.attention_context(p, v, 2, 2)?;
            weighted(t, c)
        });
        let target = x.softmax_rows();
        check("row_cross_entropy", &x, &|t, v| {
            let p = t.softmax_rows(v);
            t.row_cross_entropy(p, target.data().to_vec(), vec![0.5, 1.0, 0.0, 2.0], 0.3)
        });
        check("cosine a", &x, &|t, v| {
            let b = t.constant(&w);
            t.cosine_rows(v, b)
        });
        check("cosine b", &x, &|t, v| {
            let a = t.constant(&w);
            t.cosine_rows(a, v)
        });
    }

    #[test]
    fn independent_tapes_give_identical_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 3], &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let v = tape.leaf(&x, true);
            let y = tape.softmax_rows(v);
            let y = tape.gelu(y);
            let s = tape.sum(y);
            tape.backward(s).unwrap().get(v).unwrap().to_vec()
        };
        let first = run();
        let mut other = Tape::new();
        let o = other.leaf(&x, true);
        let _ = other.scale(o, 3.0);
        assert_eq!(first, run());
    }
}
