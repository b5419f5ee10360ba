//! Named trainable parameters, initialization schemes, and the
//! finite-difference gradient oracle.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor2D};

/// One named parameter: its value and an accumulated gradient of the same
/// shape.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub value: Tensor2D<T>,
    pub grad: Tensor2D<T>,
}

/// Map from parameter name to (value, gradient).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2D<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Evaluation(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor2D::zeros(value.rows(), value.cols());
        self.entries.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Evaluation(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Evaluation(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor2D<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = Tensor2D::zeros(p.value.rows(), p.value.cols());
        }
    }

    /// Register every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &Tape<T>) -> Binding<T> {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone())))
            .collect();
        Binding { vars }
    }
}

/// Tape variables for one forward pass, keyed by parameter name.
pub struct Binding<T: Scalar> {
    vars: BTreeMap<String, Var<T>>,
}

impl<T: Scalar> Binding<T> {
    /// Builds a binding from existing tape variables; lets callers regroup
    /// one flat binding into per-model views.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<T>)>) -> Self {
        Binding {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<&Var<T>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Evaluation(format!("unbound parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<T>)> {
        self.vars.iter()
    }
}

/// Runs reverse-mode accumulation from `loss` and adds the result into the
/// gradient slot of every parameter in `store`. Parameters the loss does
/// not reach receive nothing (their slots keep their zeros). Calling twice
/// without [`ParamStore::zero_grads`] accumulates.
pub fn backward<T: Scalar>(
    loss: &Var<T>,
    store: &mut ParamStore<T>,
    binding: &Binding<T>,
) -> Result<()> {
    let grads = loss.backward()?;
    for (name, var) in binding.iter() {
        let g = grads.get(var);
        store.get_mut(name)?.grad.add_assign(&g);
    }
    Ok(())
}

/// Parameter initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    XavierUniform,
    Zeros,
    Constant(f64),
}

/// Deterministic initialization: identical seeds give bit-identical
/// tensors.
pub fn init_params<T: Scalar>(
    rows: usize,
    cols: usize,
    scheme: InitScheme,
    seed: u64,
) -> Tensor2D<T> {
    match scheme {
        InitScheme::Zeros => Tensor2D::zeros(rows, cols),
        InitScheme::Constant(c) => Tensor2D::full(rows, cols, T::from_f64(c)),
        InitScheme::XavierUniform => {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..rows * cols)
                .map(|_| T::from_f64(rng.gen_range(-a..a)))
                .collect();
            Tensor2D::new(rows, cols, data).expect("finite init")
        }
    }
}

/// Central-difference check of the gradients currently held in `store`
/// against the scalar function `f`. Returns the maximum relative error,
/// with denominator max(|analytic|, |numeric|, 1e-8).
///
/// The caller fills the analytic gradients first (forward + [`backward`]).
/// Only meaningful in 64-bit precision mode.
pub fn finite_difference_check<T: Scalar>(
    mut f: impl FnMut(&ParamStore<T>) -> Result<T>,
    store: &mut ParamStore<T>,
    step: T,
) -> Result<f64> {
    if T::PRECISION != Precision::F64 {
        return Err(Error::Evaluation(
            "finite_difference_check requires the 64-bit precision mode".into(),
        ));
    }
    if step <= T::zero() {
        return Err(Error::Evaluation("finite-difference step must be > 0".into()));
    }
    let names: Vec<String> = store.names().cloned().collect();
    let mut max_rel = 0.0f64;
    for name in names {
        let (rows, cols) = {
            let p = store.get(&name)?;
            (p.value.rows(), p.value.cols())
        };
        for r in 0..rows {
            for c in 0..cols {
                let orig = store.get(&name)?.value.get(r, c);
                store.get_mut(&name)?.value.set(r, c, orig + step);
                let plus = f(store)?;
                store.get_mut(&name)?.value.set(r, c, orig - step);
                let minus = f(store)?;
                store.get_mut(&name)?.value.set(r, c, orig);
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::Evaluation(
                        "non-finite loss during finite differences".into(),
                    ));
                }
                let numeric = (plus - minus).as_f64() / (2.0 * step.as_f64());
                let analytic = store.get(&name)?.grad.get(r, c).as_f64();
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                max_rel = max_rel.max((analytic - numeric).abs() / denom);
            }
        }
    }
    Ok(max_rel)
}

/// Convenience wrapper: builds the loss with `build`, fills analytic
/// gradients, then compares against central differences.
pub fn gradient_check<T: Scalar>(
    build: impl Fn(&Tape<T>, &Binding<T>) -> Result<Var<T>>,
    store: &mut ParamStore<T>,
    step: T,
) -> Result<f64> {
    store.zero_grads();
    let tape = Tape::new();
    let binding = store.bind(&tape);
    let loss = build(&tape, &binding)?;
    backward(&loss, store, &binding)?;
    finite_difference_check(
        |s| {
            let tape = Tape::new();
            let binding = s.bind(&tape);
            Ok(build(&tape, &binding)?.value().get(0, 0))
        },
        store,
        step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;

    #[test]
    fn init_examples() {
        let z = init_params::<f64>(2, 2, InitScheme::Zeros, 0);
        assert_eq!(z, Tensor2D::zeros(2, 2));
        let c = init_params::<f64>(1, 3, InitScheme::Constant(1.0), 0);
        assert_eq!(c.data(), &[1.0, 1.0, 1.0]);
        let a = init_params::<f64>(4, 4, InitScheme::XavierUniform, 7);
        let b = init_params::<f64>(4, 4, InitScheme::XavierUniform, 7);
        assert_eq!(a, b);
        let bound = (6.0 / 8.0f64).sqrt();
        assert!(a.data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor2D::zeros(1, 1)).unwrap();
        assert!(store.insert("w", Tensor2D::zeros(1, 1)).is_err());
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("w", Tensor2D::new(1, 1, vec![2.0]).unwrap())
            .unwrap();
        for _ in 0..2 {
            let tape = Tape::new();
            let binding = store.bind(&tape);
            let loss = binding.var("w").unwrap().sum_all().unwrap();
            backward(&loss, &mut store, &binding).unwrap();
        }
        assert_eq!(store.get("w").unwrap().grad.get(0, 0), 2.0);
    }

    #[test]
    fn finite_difference_on_constant_is_zero() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor2D::zeros(2, 2)).unwrap();
        let err = finite_difference_check(|_| Ok(5.0), &mut store, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_difference_exact_on_linear() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("w", Tensor2D::new(1, 1, vec![0.7]).unwrap())
            .unwrap();
        let err = gradient_check(
            |_, b| b.var("w")?.scale(3.0)?.sum_all(),
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn composed_expression_passes_gradient_check() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("w1", init_params(3, 4, InitScheme::XavierUniform, 1))
            .unwrap();
        store
            .insert("w2", init_params(4, 2, InitScheme::XavierUniform, 2))
            .unwrap();
        let x = Tensor2D::from_rows(&[vec![0.3, -0.8, 0.5], vec![1.1, 0.2, -0.4]]).unwrap();
        let err = gradient_check(
            |tape, b| {
                let x = tape.constant(x.clone());
                x.matmul(b.var("w1")?)?
                    .activation(Activation::LeakyRelu(0.2))?
                    .matmul(b.var("w2")?)?
                    .softmax_rows(None)?
                    .ln()?
                    .mean_all()
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn f32_mode_refuses_finite_differences() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor2D::zeros(1, 1)).unwrap();
        assert!(finite_difference_check(|_| Ok(0.0f32), &mut store, 1e-3).is_err());
    }
}
