use super::{BackwardArgs, Tensor, Var};

fn unary<'t>(
    x: Var<'t>,
    f: impl Fn(f64) -> f64,
    // derivative given (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'t> {
    let out = x.tape.with_values(&[x.id], |v| {
        Tensor::new(v[0].shape().to_vec(), v[0].data().iter().map(|&a| f(a)).collect())
    });
    x.tape.push(
        out,
        &[x],
        Box::new(move |a: &BackwardArgs<'_>| {
            let g = a
                .gout
                .iter()
                .zip(a.inputs[0].data())
                .zip(a.out.data())
                .map(|((g, &i), &o)| g * df(i, o))
                .collect();
            vec![Some(g)]
        }),
    )
}

fn binary<'t>(
    a: Var<'t>,
    b: Var<'t>,
    f: impl Fn(f64, f64) -> f64,
    // partials given (a, b) -> (d/da, d/db)
    df: impl Fn(f64, f64) -> (f64, f64) + 'static,
) -> Var<'t> {
    let out = a.tape.with_values(&[a.id, b.id], |v| {
        assert_eq!(v[0].shape(), v[1].shape(), "elementwise shape mismatch");
        Tensor::new(
            v[0].shape().to_vec(),
            v[0].data().iter().zip(v[1].data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    });
    a.tape.push(
        out,
        &[a, b],
        Box::new(move |args: &BackwardArgs<'_>| {
            let n = args.gout.len();
            let (mut ga, mut gb) = (vec![0.0; n], vec![0.0; n]);
            let (xa, xb) = (args.inputs[0].data(), args.inputs[1].data());
            for i in 0..n {
                let (da, db) = df(xa[i], xb[i]);
                ga[i] = args.gout[i] * da;
                gb[i] = args.gout[i] * db;
            }
            vec![args.needs[0].then_some(ga), args.needs[1].then_some(gb)]
        }),
    )
}

impl<'t> Var<'t> {
    pub fn add(self, o: Var<'t>) -> Var<'t> {
        binary(self, o, |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        binary(self, o, |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        binary(self, o, |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(self, o: Var<'t>) -> Var<'t> {
        binary(self, o, |a, b| a / b, |a, b| (1.0 / b, -a / (b * b)))
    }

    /// Elementwise minimum; the gradient follows the smaller input (the first
    /// on ties).
    pub fn minimum(self, o: Var<'t>) -> Var<'t> {
        binary(self, o, f64::min, |a, b| if a <= b { (1.0, 0.0) } else { (0.0, 1.0) })
    }

    pub fn maximum(self, o: Var<'t>) -> Var<'t> {
        binary(self, o, f64::max, |a, b| if a >= b { (1.0, 0.0) } else { (0.0, 1.0) })
    }

    pub fn neg(self) -> Var<'t> {
        unary(self, |a| -a, |_, _| -1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        unary(self, move |a| a + c, |_, _| 1.0)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        unary(self, move |a| a * c, move |_, _| c)
    }

    /// `1 - x`
    pub fn one_minus(self) -> Var<'t> {
        unary(self, |a| 1.0 - a, |_, _| -1.0)
    }

    pub fn exp(self) -> Var<'t> {
        unary(self, f64::exp, |_, o| o)
    }

    pub fn ln(self) -> Var<'t> {
        unary(self, f64::ln, |i, _| 1.0 / i)
    }

    pub fn sqrt(self) -> Var<'t> {
        unary(self, f64::sqrt, |_, o| 0.5 / o)
    }

    pub fn square(self) -> Var<'t> {
        unary(self, |a| a * a, |i, _| 2.0 * i)
    }

    pub fn abs(self) -> Var<'t> {
        unary(self, f64::abs, |i, _| i.signum())
    }

    /// `|x|^p` for `p >= 1`.
    pub fn abs_pow(self, p: f64) -> Var<'t> {
        unary(self, move |a| a.abs().powf(p), move |i, _| p * i.abs().powf(p - 1.0) * i.signum())
    }

    pub fn sigmoid(self) -> Var<'t> {
        unary(self, sigmoid, |_, o| o * (1.0 - o))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        unary(
            self,
            move |a| if a > 0.0 { a } else { slope * a },
            move |i, _| if i > 0.0 { 1.0 } else { slope },
        )
    }

    /// Clamps into `[lo, hi]`; no gradient flows where the clamp is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        unary(self, move |a| a.clamp(lo, hi), move |i, _| if i < lo || i > hi { 0.0 } else { 1.0 })
    }

    /// Multiplies every element by the single element of `s`.
    pub fn scale(self, s: Var<'t>) -> Var<'t> {
        let out = self.tape.with_values(&[self.id, s.id], |v| {
            let k = v[1].item();
            Tensor::new(v[0].shape().to_vec(), v[0].data().iter().map(|a| a * k).collect())
        });
        self.tape.push(
            out,
            &[self, s],
            Box::new(|a: &BackwardArgs<'_>| {
                let k = a.inputs[1].item();
                let gx = a.needs[0].then(|| a.gout.iter().map(|g| g * k).collect());
                let gs = a.needs[1]
                    .then(|| vec![a.gout.iter().zip(a.inputs[0].data()).map(|(g, x)| g * x).sum()]);
                vec![gx, gs]
            }),
        )
    }

    pub fn sum(self) -> Var<'t> {
        let out = self.tape.with_values(&[self.id], |v| Tensor::scalar(v[0].data().iter().sum()));
        self.tape.push(
            out,
            &[self],
            Box::new(|a: &BackwardArgs<'_>| vec![Some(vec![a.gout[0]; a.inputs[0].len()])]),
        )
    }

    /// Mean of all elements; the mean of an empty tensor is 0.
    pub fn mean(self) -> Var<'t> {
        let n = self.len();
        if n == 0 {
            return self.sum();
        }
        self.sum().mul_scalar(1.0 / n as f64)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t> {
        let out = self.tape.with_values(&[self.id], |v| v[0].clone().reshape(shape));
        self.tape.push(out, &[self], Box::new(|a: &BackwardArgs<'_>| vec![Some(a.gout.to_vec())]))
    }

    /// Picks flat elements by index into a vector.
    pub fn gather(self, idx: &[usize]) -> Var<'t> {
        let idx = idx.to_vec();
        let out = self
            .tape
            .with_values(&[self.id], |v| Tensor::vector(idx.iter().map(|&i| v[0].data()[i]).collect()));
        self.tape.push(
            out,
            &[self],
            Box::new(move |a: &BackwardArgs<'_>| {
                let mut g = vec![0.0; a.inputs[0].len()];
                for (&i, gv) in idx.iter().zip(a.gout) {
                    g[i] += gv;
                }
                vec![Some(g)]
            }),
        )
    }

    /// Copy of `self` with the flat positions `idx` replaced by `values`.
    pub fn overwrite(self, idx: &[usize], values: Var<'t>) -> Var<'t> {
        let idx = idx.to_vec();
        let out = self.tape.with_values(&[self.id, values.id], |v| {
            assert_eq!(idx.len(), v[1].len());
            let mut t = v[0].clone();
            for (&i, &x) in idx.iter().zip(v[1].data()) {
                t.data_mut()[i] = x;
            }
            t
        });
        self.tape.push(
            out,
            &[self, values],
            Box::new(move |a: &BackwardArgs<'_>| {
                let mut gb = a.gout.to_vec();
                let gv: Vec<f64> = idx.iter().map(|&i| a.gout[i]).collect();
                for &i in &idx {
                    gb[i] = 0.0;
                }
                vec![Some(gb), Some(gv)]
            }),
        )
    }

    /// Softmax over every element (treated as one vector).
    pub fn softmax(self) -> Var<'t> {
        let out = self.tape.with_values(&[self.id], |v| {
            let d = v[0].data();
            let m = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = d.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            Tensor::new(v[0].shape().to_vec(), e.iter().map(|x| x / s).collect())
        });
        self.tape.push(
            out,
            &[self],
            Box::new(|a: &BackwardArgs<'_>| {
                let y = a.out.data();
                let dot: f64 = a.gout.iter().zip(y).map(|(g, y)| g * y).sum();
                vec![Some(a.gout.iter().zip(y).map(|(g, y)| y * (g - dot)).collect())]
            }),
        )
    }

    /// Mean squared error against `o`.
    pub fn mse(self, o: Var<'t>) -> Var<'t> {
        self.sub(o).square().mean()
    }
}

/// Flat concatenation of any number of vars.
pub fn concat<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let (out, lens) = tape.with_values(&ids, |v| {
        let lens: Vec<usize> = v.iter().map(|t| t.len()).collect();
        let data: Vec<f64> = v.iter().flat_map(|t| t.data().iter().copied()).collect();
        (Tensor::vector(data), lens)
    });
    tape.push(
        out,
        parts,
        Box::new(move |a: &BackwardArgs<'_>| {
            let mut off = 0;
            lens.iter()
                .zip(&a.needs)
                .map(|(&n, &need)| {
                    let g = need.then(|| a.gout[off..off + n].to_vec());
                    off += n;
                    g
                })
                .collect()
        }),
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::fd_check;
    use super::super::Tape;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::vector((0..n).map(|_| rng.random_range(lo..hi)).collect())
    }

    const PROBES: [usize; 20] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19];

    #[test]
    fn sum_of_squares_grad() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let loss = x.square().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn product_rule_chain() {
        // f = (a * b) * a  -> df/da = 2ab, df/db = a^2
        let tape = Tape::new();
        let a = tape.param(Tensor::scalar(3.0));
        let b = tape.param(Tensor::scalar(5.0));
        let f = a.mul(b).mul(a);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(a).unwrap(), &[30.0]);
        assert_eq!(g.get(b).unwrap(), &[9.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = x.square();
        assert!(matches!(tape.backward(y), Err(crate::autodiff::AutodiffError::Contract(_))));
    }

    #[test]
    fn detached_values_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.5, -0.5]));
        let d = x.detach();
        let loss = x.mul(d).sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.5, -0.5]);
        assert!(g.get(d).is_none());
    }

    #[test]
    fn softmax_uniform_and_normalized() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.7; 8]));
        for v in x.softmax().data() {
            assert!((v - 0.125).abs() < 1e-15);
        }
        let r = tape.constant(random(8, -4.0, 4.0, 9));
        let s: f64 = r.softmax().data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn elementwise_finite_differences() {
        let x = random(20, -2.0, 2.0, 1);
        let pos = random(20, 0.2, 3.0, 2);
        let w = random(20, -1.0, 1.0, 3);
        let h = 1e-5;
        let tol = 1e-4;
        fn weighted<'a>(v: Var<'a>, w: &Tensor) -> Var<'a> {
            v.mul(v.tape().constant(w.clone())).sum()
        }
        assert!(fd_check(&x, &PROBES, h, |_, v| weighted(v.exp(), &w)) < tol);
        assert!(fd_check(&x, &PROBES, h, |_, v| weighted(v.sigmoid(), &w)) < tol);
        assert!(fd_check(&x, &PROBES, h, |_, v| weighted(v.square(), &w)) < tol);
        assert!(fd_check(&pos, &PROBES, h, |_, v| weighted(v.ln(), &w)) < tol);
        assert!(fd_check(&pos, &PROBES, h, |_, v| weighted(v.sqrt(), &w)) < tol);
        assert!(fd_check(&x, &PROBES, h, |_, v| weighted(v.softmax(), &w)) < tol);
        assert!(fd_check(&x, &PROBES, h, |_, v| weighted(v.mul(v).add(v).div(v.exp()), &w)) < tol);
        assert!(fd_check(&x, &PROBES, h, |t, v| {
            let c = t.constant(w.clone());
            v.mse(c)
        }) < tol);
        assert!(fd_check(&x, &PROBES, h, |_, v| {
            let s = v.gather(&[3]);
            weighted(v.scale(s), &w)
        }) < tol);
    }
}
