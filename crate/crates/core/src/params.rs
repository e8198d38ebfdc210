//! Named parameter containers and initializers.
//!
//! Parameter structs are generic over the leaf type: `Tensor<T>` for stored
//! weights, `Var` once bound to a tape. [`param_struct!`] generates the field
//! visitors used for binding, serialization and optimization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::normal;
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::Result;

macro_rules! param_struct {
    ($(#[$m:meta])* $vis:vis struct $name:ident { $($(#[$fm:meta])* $field:ident),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        $vis struct $name<P> {
            $($(#[$fm])* pub $field: P),*
        }

        impl<P> $name<P> {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn fields(&self) -> Vec<(&'static str, &P)> {
                vec![$((stringify!($field), &self.$field)),*]
            }

            pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut P)> {
                vec![$((stringify!($field), &mut self.$field)),*]
            }

            pub fn try_map<Q, E>(&self, mut f: impl FnMut(&'static str, &P) -> ::std::result::Result<Q, E>)
                -> ::std::result::Result<$name<Q>, E>
            {
                Ok($name { $($field: f(stringify!($field), &self.$field)?),* })
            }
        }
    };
}

pub(crate) use param_struct;

/// Binds every tensor as a gradient-requiring leaf.
pub fn bind_leaf<T: Real>(tape: &Tape<T>) -> impl FnMut(&'static str, &Tensor<T>) -> Result<Var> + '_ {
    move |_, t| tape.leaf(t.clone())
}

/// Binds every tensor as a constant (inference).
pub fn bind_const<T: Real>(tape: &Tape<T>) -> impl FnMut(&'static str, &Tensor<T>) -> Result<Var> + '_ {
    move |_, t| tape.constant(t.clone())
}

/// Gaussian init with standard deviation `std`.
pub fn normal_init<T: Real>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(std * normal(rng)))
}

/// He-normal init for a conv or linear weight with the given fan-in.
pub fn he_init<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    normal_init(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// `rows × cols` matrix with orthonormal columns (or rows, whichever is
/// fewer), scaled by `gain`. Gram–Schmidt on a Gaussian draw.
pub fn orthogonal_init<T: Real>(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let tall = rows >= cols;
    let (n, k) = if tall { (rows, cols) } else { (cols, rows) };
    // k vectors of length n
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    Tensor::from_fn(&[rows, cols], |i| {
        let (r, c) = (i / cols, i % cols);
        let v = if tall { basis[c][r] } else { basis[r][c] };
        T::from_f64(gain * v)
    })
}

/// Uniform draw in `[lo, hi)` as a tensor.
pub fn uniform_init<T: Real>(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    param_struct! {
        struct Pair { a, b }
    }

    #[test]
    fn macro_visits_in_declaration_order() {
        let mut p = Pair { a: 1, b: 2 };
        assert_eq!(Pair::<i32>::NAMES, &["a", "b"]);
        assert_eq!(p.fields(), vec![("a", &1), ("b", &2)]);
        for (_, v) in p.fields_mut() {
            *v *= 10;
        }
        assert_eq!((p.a, p.b), (10, 20));
        let q: Pair<String> = p.try_map(|n, v| Ok::<_, ()>(format!("{n}{v}"))).unwrap();
        assert_eq!(q.b, "b20");
    }

    #[test]
    fn orthogonal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, c) in [(8, 3), (3, 8), (5, 5)] {
            let m: Tensor<f64> = orthogonal_init(r, c, 1.0, &mut rng);
            let g = if r >= c {
                // columns orthonormal: MᵀM = I
                let mt = m.transpose2().unwrap();
                let mut out = vec![0.0; c * c];
                f64::gemm(c, r, c, mt.data(), false, m.data(), false, &mut out, false);
                out
            } else {
                let mt = m.transpose2().unwrap();
                let mut out = vec![0.0; r * r];
                f64::gemm(r, c, r, m.data(), false, mt.data(), false, &mut out, false);
                out
            };
            let k = r.min(c);
            for i in 0..k {
                for j in 0..k {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((g[i * k + j] - e).abs() < 1e-12);
                }
            }
        }
    }
}
