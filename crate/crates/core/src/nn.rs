//! Parameters, forward contexts, and the basic layers built on the tape.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{rten, Element, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Adds per-parameter gradients (indexed like the store).
    pub fn accumulate_grads(&mut self, grads: &[Tensor<T>]) -> Result<()> {
        for (p, g) in self.tensors.iter_mut().zip(grads) {
            p.accumulate_grad(g.data())?;
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.detached().cast::<U>().with_requires_grad(true)).collect(),
            index: self.index.clone(),
        }
    }

    /// Writes each parameter to `<dir>/<name>.rten` as f32.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in self.iter() {
            rten::write(dir.join(format!("{name}.rten")), &t.detached().cast::<f32>())?;
        }
        Ok(())
    }

    /// Overwrites every parameter from `<dir>/<name>.rten`; shapes must match.
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        for i in 0..self.tensors.len() {
            let path = dir.join(format!("{}.rten", self.names[i]));
            let t = rten::read(&path)?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Format {
                    path,
                    msg: format!("shape {:?} does not match model {:?}", t.shape(), self.tensors[i].shape()),
                });
            }
            self.tensors[i] = t.cast::<T>().with_requires_grad(true);
        }
        Ok(())
    }
}

/// 64-bit FNV-1a, used to derive stable per-parameter seeds from names.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    /// He uniform, `±sqrt(6/fan_in)`, for layers feeding a ReLU.
    HeUniform(usize),
}

/// Registers parameters with deterministic, name-seeded initial values.
///
/// Two models built from the same seed get identical values for every
/// parameter name they share, whatever else they contain.
pub struct Builder<'a, T: Element> {
    pub store: &'a mut ParamStore<T>,
    seed: u64,
    prefix: String,
}

impl<'a, T: Element> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Builder {
            store,
            seed,
            prefix: String::new(),
        }
    }

    /// Builder whose parameter names are prefixed with `scope.`.
    pub fn scope(&mut self, scope: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            scope.to_string()
        } else {
            format!("{}.{scope}", self.prefix)
        };
        Builder {
            store: self.store,
            seed: self.seed,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(full.as_bytes()));
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect(),
            Init::HeUniform(fan_in) => {
                let b = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..b)).collect()
            }
        };
        self.store.register(full, Tensor::from_f64(shape, &data)?)
    }
}

/// One forward episode: a fresh tape plus lazily bound parameter leaves.
pub struct Ctx<'p, T: Element> {
    pub tape: Tape<T>,
    store: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'p, T: Element> Ctx<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    /// Binds without gradient tracking (evaluation).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.tape.shape(v)
    }

    /// Runs backward and returns one gradient per stored parameter
    /// (zeros for parameters the loss does not reach).
    pub fn backward(self, loss: Var) -> Result<Vec<Tensor<T>>> {
        let Ctx { tape, store, bound } = self;
        let grads: Gradients<T> = tape.backward(loss)?;
        Ok(bound
            .iter()
            .enumerate()
            .map(|(i, v)| match v.and_then(|v| grads.get(v)) {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.get(ParamId(i)).shape()),
            })
            .collect())
    }
}

/// `y = x·W + b` over the last axis of a rank-2 or rank-3 input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, name: &str, in_dim: usize, out_dim: usize, std: f64) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Linear {
            weight: s.param("weight", &[in_dim, out_dim], Init::TruncNormal(std))?,
            bias: s.param("bias", &[out_dim], Init::Zeros)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add(y, b)
    }
}

/// Zero-padded convolution over `[H,W,C]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let w = Init::HeUniform(kernel * kernel * cin);
        Self::with_init(b, name, cin, cout, kernel, stride, padding, w, Init::Zeros)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Conv2d {
            weight: s.param("weight", &[kernel, kernel, cin, cout], weight)?,
            bias: s.param("bias", &[cout], bias)?,
            stride,
            padding,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        let y = ctx.tape.conv2d(x, w, self.stride, self.padding)?;
        ctx.tape.add(y, b)
    }
}

/// Transposed convolution with kernel = stride (non-overlapping upsample).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(ConvTranspose2d {
            weight: s.param("weight", &[cin, stride, stride, cout], Init::HeUniform(cin))?,
            bias: s.param("bias", &[cout], Init::Zeros)?,
            stride,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        let y = ctx.tape.conv_transpose2d(x, w, self.stride)?;
        ctx.tape.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(LayerNorm {
            gamma: s.param("gamma", &[dim], Init::Const(1.0))?,
            beta: s.param("beta", &[dim], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        let n = ctx.tape.layernorm(x, self.eps)?;
        let y = ctx.tape.mul(n, g)?;
        ctx.tape.add(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn name_seeded_init_is_stable_across_stores() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        Builder::new(&mut a, 3).param("x.w", &[4], Init::TruncNormal(0.02)).unwrap();
        {
            let mut bb = Builder::new(&mut b, 3);
            bb.param("other", &[9], Init::TruncNormal(0.02)).unwrap();
            bb.scope("x").param("w", &[4], Init::TruncNormal(0.02)).unwrap();
        }
        assert_eq!(a.by_name("x.w").unwrap().data(), b.by_name("x.w").unwrap().data());
        assert!(a.by_name("x.w").unwrap().data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        let mut b = Builder::new(&mut s, 0);
        b.param("a", &[1], Init::Zeros).unwrap();
        assert!(b.param("a", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn unused_params_get_zero_grads() {
        let mut s = ParamStore::<f64>::new();
        let (used, unused) = {
            let mut b = Builder::new(&mut s, 0);
            (
                b.param("u", &[2], Init::Const(1.0)).unwrap(),
                b.param("n", &[3], Init::Const(1.0)).unwrap(),
            )
        };
        let mut ctx = Ctx::new(&s);
        let u = ctx.param(used);
        let l = ctx.tape.sum(u).unwrap();
        let g = ctx.backward(l).unwrap();
        assert_eq!(g[0].data(), &[1.0, 1.0]);
        assert_eq!(g[1].data(), &[0.0; 3]);
        let _ = unused;
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        Builder::new(&mut s, 9).scope("enc").param("w", &[2, 3], Init::TruncNormal(0.5)).unwrap();
        s.save_dir(dir.path()).unwrap();
        let mut t = ParamStore::<f32>::new();
        Builder::new(&mut t, 1).scope("enc").param("w", &[2, 3], Init::Zeros).unwrap();
        t.load_dir(dir.path()).unwrap();
        assert_eq!(s.by_name("enc.w").unwrap().data(), t.by_name("enc.w").unwrap().data());

        let mut wrong = ParamStore::<f32>::new();
        Builder::new(&mut wrong, 1).scope("enc").param("w", &[3, 2], Init::Zeros).unwrap();
        assert!(matches!(wrong.load_dir(dir.path()), Err(Error::Format { .. })));
    }
}
