//! Small fully connected noise predictor.
//!
//! Input is `z ‖ t/T ‖ emb(c)` where `emb` is a learned vector per concept
//! plus one for the null condition (row 0). Hidden layers use `tanh`; the
//! output layer is affine. An optional analytic skip path adds
//! `k_t z`, `k_t = sqrt(1 - a_t) / (a_t v + 1 - a_t)`, which is the exact noise
//! prediction for zero-mean isotropic data of variance `v`; the network then
//! only has to learn the mean-dependent remainder.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{check_dim, Denoiser, Linearized};
use crate::error::{Error, Result};
use crate::latent::{ConceptTable, Condition, Latent};
use crate::schedule::{NoiseSchedule, Timestep};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkipPath {
    pub variance: f64,
    /// One coefficient per timestep index `0..=T`.
    pub coefficients: Vec<f64>,
}

impl SkipPath {
    pub fn new(schedule: &NoiseSchedule, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Parameter("skip variance must be > 0".into()));
        }
        let boundary = schedule.boundary_timestep()?.alpha;
        let coefficients = schedule
            .alphas()
            .iter()
            .enumerate()
            .map(|(t, &a)| {
                let a = if t == 0 { boundary } else { a };
                (1.0 - a).sqrt() / (a * variance + 1.0 - a)
            })
            .collect();
        Ok(Self {
            variance,
            coefficients,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpDenoiser {
    dim: usize,
    num_steps: usize,
    layers: Vec<DenseLayer>,
    /// Row 0 is the null condition, row `i + 1` is concept `i`.
    embeddings: Array2<f64>,
    skip: Option<SkipPath>,
    concepts: ConceptTable,
}

/// Parameter gradients laid out like [`MlpDenoiser::params_flat`].
#[derive(Clone, Debug)]
pub struct MlpGradients {
    pub flat: Vec<f64>,
}

/// A minibatch of noised inputs and regression targets.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub z_t: Array2<f64>,
    pub steps: Vec<Timestep>,
    pub conds: Vec<Condition>,
    pub targets: Array2<f64>,
}

impl MlpDenoiser {
    /// All-zero network with the given hidden widths.
    pub fn zeros(
        dim: usize,
        hidden: &[usize],
        embed_dim: usize,
        num_steps: usize,
        concepts: ConceptTable,
    ) -> Result<Self> {
        if dim == 0 || hidden.contains(&0) {
            return Err(Error::Parameter("layer widths must be positive".into()));
        }
        let mut widths = vec![dim + 1 + embed_dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer::zeros(w[0], w[1]))
            .collect();
        Ok(Self {
            dim,
            num_steps,
            layers,
            embeddings: Array2::zeros((concepts.len() + 1, embed_dim)),
            skip: None,
            concepts,
        })
    }

    /// Random initialisation: weights and biases `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// embeddings `N(0, 0.1^2)`.
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        hidden: &[usize],
        embed_dim: usize,
        num_steps: usize,
        concepts: ConceptTable,
        rng: &mut R,
    ) -> Result<Self> {
        let mut m = Self::zeros(dim, hidden, embed_dim, num_steps, concepts)?;
        for layer in &mut m.layers {
            let bound = (1.0 / layer.inputs() as f64).sqrt();
            let uniform = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            layer.weights.mapv_inplace(|_| uniform.sample(rng));
            layer.bias.mapv_inplace(|_| uniform.sample(rng));
        }
        let normal = Normal::new(0.0, 0.1).expect("valid sd");
        m.embeddings.mapv_inplace(|_| normal.sample(rng));
        Ok(m)
    }

    /// Assembles a network from explicit layers (last one is the output layer).
    pub fn from_parts(
        dim: usize,
        num_steps: usize,
        layers: Vec<DenseLayer>,
        embeddings: Array2<f64>,
        skip: Option<SkipPath>,
        concepts: ConceptTable,
    ) -> Result<Self> {
        let m = Self {
            dim,
            num_steps,
            layers,
            embeddings,
            skip,
            concepts,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Model("network has no layers".into()))?;
        if first.inputs() != self.dim + 1 + self.embed_dim() {
            return Err(Error::Model(format!(
                "input width {} != dim + 1 + embedding width {}",
                first.inputs(),
                self.dim + 1 + self.embed_dim()
            )));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Model(format!("layer {} output does not feed layer {}", i, i + 1)));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::Model(format!("layer {i} bias has wrong length")));
            }
        }
        if self.layers.last().map(DenseLayer::outputs) != Some(self.dim) {
            return Err(Error::Model("output width must equal latent dimension".into()));
        }
        if self.embeddings.nrows() != self.concepts.len() + 1 {
            return Err(Error::Model("need one embedding per concept plus null".into()));
        }
        if let Some(skip) = &self.skip {
            if skip.coefficients.len() != self.num_steps + 1 {
                return Err(Error::Model("skip path needs one coefficient per timestep".into()));
            }
        }
        if !self.params_flat().iter().all(|p| p.is_finite()) {
            return Err(Error::Model("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn with_skip(mut self, skip: SkipPath) -> Result<Self> {
        self.skip = Some(skip);
        self.validate()?;
        Ok(self)
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Array2<f64> {
        &mut self.embeddings
    }

    pub fn skip(&self) -> Option<&SkipPath> {
        self.skip.as_ref()
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    fn embedding_row(cond: Condition) -> usize {
        match cond {
            Condition::Null => 0,
            Condition::Concept(id) => id.0 + 1,
        }
    }

    fn skip_coefficient(&self, step: Timestep) -> Result<f64> {
        match &self.skip {
            None => Ok(0.0),
            Some(skip) => {
                if step.num_steps != self.num_steps {
                    return Err(Error::Model(format!(
                        "skip path built for {} steps, queried with {}",
                        self.num_steps, step.num_steps
                    )));
                }
                skip.coefficients
                    .get(step.index)
                    .copied()
                    .ok_or(Error::Index {
                        index: step.index,
                        max: self.num_steps,
                    })
            }
        }
    }

    fn input_vector(&self, z: &Latent, step: Timestep, cond: Condition) -> Array1<f64> {
        let mut x = Array1::zeros(self.layers[0].inputs());
        x.slice_mut(s![..self.dim]).assign(&ArrayView1::from(z.as_slice()));
        x[self.dim] = step.fraction();
        x.slice_mut(s![self.dim + 1..])
            .assign(&self.embeddings.row(Self::embedding_row(cond)));
        x
    }

    /// `[input, hidden_1, .., hidden_L, output]` for one point (output
    /// excludes the skip term).
    fn activations(&self, x: Array1<f64>) -> Vec<Array1<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = layer.weights.dot(acts.last().expect("input pushed")) + &layer.bias;
            if i < last {
                h.mapv_inplace(f64::tanh);
            }
            acts.push(h);
        }
        acts
    }

    /// Deterministic forward pass.
    pub fn mlp_forward(&self, z: &Latent, step: Timestep, cond: Condition) -> Result<Latent> {
        self.check_input(z, cond)?;
        let k = self.skip_coefficient(step)?;
        let acts = self.activations(self.input_vector(z, step, cond));
        let out = acts.last().expect("output");
        Ok(Latent::from_vec(
            out.iter().zip(z.as_slice()).map(|(o, zi)| o + k * zi).collect(),
        ))
    }

    /// Reverse-mode `v^T (d eps / d z)` with parameters held fixed.
    pub fn mlp_input_vjp(&self, z: &Latent, step: Timestep, cond: Condition, v: &Latent) -> Result<Latent> {
        check_dim(self.dim, v)?;
        Ok(self.linearize(z, step, cond)?.vjp(v))
    }

    fn pullback(&self, acts: &[Array1<f64>], skip: f64, v: &Latent) -> Latent {
        let mut delta = Array1::from(v.as_slice().to_vec());
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                let a = &acts[i + 1];
                delta.zip_mut_with(a, |d, &h| *d *= 1.0 - h * h);
            }
            delta = self.layers[i].weights.t().dot(&delta);
        }
        Latent::from_vec(
            delta
                .iter()
                .take(self.dim)
                .zip(v.as_slice())
                .map(|(g, vi)| g + skip * vi)
                .collect(),
        )
    }

    /// Activations of `layer`: 0 is the embedded input, `1..=hidden_layers()`
    /// are hidden activations.
    pub fn extract_features(&self, z: &Latent, step: Timestep, cond: Condition, layer: usize) -> Result<Vec<f64>> {
        self.check_input(z, cond)?;
        if layer > self.hidden_layers() {
            return Err(Error::Input(format!(
                "feature layer {layer} out of range 0..={}",
                self.hidden_layers()
            )));
        }
        let acts = self.activations(self.input_vector(z, step, cond));
        Ok(acts[layer].to_vec())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum::<usize>()
            + self.embeddings.len()
    }

    /// All trainable parameters: per layer weights (row-major) then bias,
    /// then the embedding table (row-major).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out.extend(self.embeddings.iter());
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Model(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = it.next().expect("length checked"));
            l.bias.iter_mut().for_each(|b| *b = it.next().expect("length checked"));
        }
        self.embeddings
            .iter_mut()
            .for_each(|e| *e = it.next().expect("length checked"));
        Ok(())
    }

    /// Flat indices of the conditioning pathway: the embedding table and the
    /// first-layer weight columns that read the embedding block.
    pub fn condition_pathway_indices(&self) -> Vec<usize> {
        let first = &self.layers[0];
        let (rows, cols) = first.weights.dim();
        let mut idx = Vec::new();
        for r in 0..rows {
            for c in (self.dim + 1)..cols {
                idx.push(r * cols + c);
            }
        }
        idx.extend(self.embedding_indices());
        idx
    }

    pub fn embedding_indices(&self) -> std::ops::Range<usize> {
        let start = self.param_count() - self.embeddings.len();
        start..self.param_count()
    }

    fn batch_inputs(&self, batch: &TrainingBatch) -> Result<Array2<f64>> {
        let n = batch.z_t.nrows();
        if batch.z_t.ncols() != self.dim
            || batch.targets.dim() != (n, self.dim)
            || batch.steps.len() != n
            || batch.conds.len() != n
        {
            return Err(Error::Model("training batch has inconsistent shapes".into()));
        }
        let mut x = Array2::zeros((n, self.layers[0].inputs()));
        x.slice_mut(s![.., ..self.dim]).assign(&batch.z_t);
        for (b, (step, cond)) in batch.steps.iter().zip(&batch.conds).enumerate() {
            self.concepts.check(*cond)?;
            x[[b, self.dim]] = step.fraction();
            x.slice_mut(s![b, self.dim + 1..])
                .assign(&self.embeddings.row(Self::embedding_row(*cond)));
        }
        Ok(x)
    }

    fn batch_forward(&self, batch: &TrainingBatch) -> Result<(Vec<Array2<f64>>, Array2<f64>)> {
        let x = self.batch_inputs(batch)?;
        let last = self.layers.len() - 1;
        let mut acts = vec![x];
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = acts.last().expect("input").dot(&layer.weights.t()) + &layer.bias;
            if i < last {
                h.mapv_inplace(f64::tanh);
            }
            acts.push(h);
        }
        let mut out = acts.pop().expect("output");
        for (b, step) in batch.steps.iter().enumerate() {
            let k = self.skip_coefficient(*step)?;
            if k != 0.0 {
                out.row_mut(b).scaled_add(k, &batch.z_t.row(b));
            }
        }
        Ok((acts, out))
    }

    /// Mean over the batch of `||eps_theta(z_t) - target||^2`.
    pub fn batch_loss(&self, batch: &TrainingBatch) -> Result<f64> {
        let (_, out) = self.batch_forward(batch)?;
        let n = out.nrows() as f64;
        Ok((&out - &batch.targets).mapv(|r| r * r).sum() / n)
    }

    /// Loss and its gradient with respect to [`MlpDenoiser::params_flat`].
    pub fn batch_loss_and_gradients(&self, batch: &TrainingBatch) -> Result<(f64, MlpGradients)> {
        let (acts, out) = self.batch_forward(batch)?;
        let n = out.nrows() as f64;
        let resid = &out - &batch.targets;
        let loss = resid.mapv(|r| r * r).sum() / n;
        let mut delta = resid * (2.0 / n);
        let last = self.layers.len() - 1;
        let mut layer_grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            if i < last {
                delta.zip_mut_with(&acts[i + 1], |d, &h| *d *= 1.0 - h * h);
            }
            let dw = delta.t().dot(&acts[i]);
            let db = delta.sum_axis(Axis(0));
            layer_grads.push((dw, db));
            delta = delta.dot(&self.layers[i].weights);
        }
        layer_grads.reverse();
        let mut emb_grad = Array2::<f64>::zeros(self.embeddings.dim());
        for (b, cond) in batch.conds.iter().enumerate() {
            let row = Self::embedding_row(*cond);
            emb_grad
                .row_mut(row)
                .scaled_add(1.0, &delta.slice(s![b, self.dim + 1..]));
        }
        let mut flat = Vec::with_capacity(self.param_count());
        for (dw, db) in &layer_grads {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        flat.extend(emb_grad.iter());
        Ok((loss, MlpGradients { flat }))
    }
}

impl Denoiser for MlpDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn concepts(&self) -> &ConceptTable {
        &self.concepts
    }

    fn epsilon(&self, z: &Latent, step: Timestep, cond: Condition) -> Result<Latent> {
        self.mlp_forward(z, step, cond)
    }

    fn linearize(&self, z: &Latent, step: Timestep, cond: Condition) -> Result<Linearized<'_>> {
        self.check_input(z, cond)?;
        let skip = self.skip_coefficient(step)?;
        let acts = self.activations(self.input_vector(z, step, cond));
        let out = acts.last().expect("output");
        let eps = Latent::from_vec(
            out.iter().zip(z.as_slice()).map(|(o, zi)| o + skip * zi).collect(),
        );
        Ok(Linearized::new(eps, move |v: &Latent| self.pullback(&acts, skip, v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn concepts() -> ConceptTable {
        ConceptTable::new(["A", "B"]).unwrap()
    }

    fn ts(index: usize, num_steps: usize) -> Timestep {
        Timestep {
            index,
            num_steps,
            alpha: 0.5,
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = MlpDenoiser::zeros(3, &[5, 4], 2, 10, concepts()).unwrap();
        let z = Latent::from_vec(vec![1.0, -4.0, 2.5]);
        let out = m.mlp_forward(&z, ts(3, 10), Condition::concept(1)).unwrap();
        assert_eq!(out.as_slice(), &[0.0; 3]);
        let g = m
            .mlp_input_vjp(&z, ts(3, 10), Condition::Null, &Latent::from_vec(vec![1.0, 2.0, 3.0]))
            .unwrap();
        assert_eq!(g.as_slice(), &[0.0; 3]);
        let f = m.extract_features(&z, ts(3, 10), Condition::Null, 2).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer() {
        let dim = 2;
        let embed = 1;
        let mut w = Array2::zeros((2, 4));
        // rows: out, cols: z0 z1 t/T emb
        w.assign(&ndarray::arr2(&[[1.0, 2.0, 3.0, 4.0], [-1.0, 0.5, 0.0, 2.0]]));
        let layer = DenseLayer {
            weights: w.clone(),
            bias: Array1::zeros(2),
        };
        let emb = ndarray::arr2(&[[0.0], [0.7], [-0.3]]);
        let m = MlpDenoiser::from_parts(dim, 4, vec![layer], emb, None, concepts()).unwrap();
        assert_eq!(m.embed_dim(), embed);
        let z = Latent::from_vec(vec![0.2, -0.1]);
        let out = m.mlp_forward(&z, ts(1, 4), Condition::concept(0)).unwrap();
        let x = [0.2, -0.1, 0.25, 0.7];
        for r in 0..2 {
            let expected: f64 = (0..4).map(|c| w[[r, c]] * x[c]).sum();
            assert!((out[r] - expected).abs() < 1e-15);
        }
        let v = Latent::from_vec(vec![1.0, 3.0]);
        let g = m.mlp_input_vjp(&z, ts(1, 4), Condition::concept(0), &v).unwrap();
        // v^T W restricted to the z block
        assert!((g[0] - (1.0 * 1.0 + 3.0 * -1.0)).abs() < 1e-15);
        assert!((g[1] - (1.0 * 2.0 + 3.0 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_model_error() {
        let m = MlpDenoiser::zeros(3, &[4], 2, 10, concepts()).unwrap();
        let z = Latent::zeros(2);
        assert!(matches!(m.mlp_forward(&z, ts(1, 10), Condition::Null), Err(Error::Model(_))));
        let bad = MlpDenoiser::from_parts(
            3,
            10,
            vec![DenseLayer::zeros(5, 3)],
            Array2::zeros((3, 2)),
            None,
            concepts(),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn input_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sched = make_linear_schedule(20, 1e-3, 0.05).unwrap();
        let m = MlpDenoiser::init(4, &[16, 16, 16], 3, 20, concepts(), &mut rng)
            .unwrap()
            .with_skip(SkipPath::new(&sched, 0.1).unwrap())
            .unwrap();
        let step = sched.timestep(7).unwrap();
        let z = Latent::from_vec(vec![0.3, -0.7, 1.1, 0.05]);
        let v = Latent::from_vec(vec![0.4, -1.0, 0.2, 0.9]);
        let g = m.mlp_input_vjp(&z, step, Condition::concept(1), &v).unwrap();
        let h = 1e-5;
        for j in 0..4 {
            let mut zp = z.clone();
            zp.as_mut_slice()[j] += h;
            let mut zm = z.clone();
            zm.as_mut_slice()[j] -= h;
            let fp = m.mlp_forward(&zp, step, Condition::concept(1)).unwrap();
            let fm = m.mlp_forward(&zm, step, Condition::concept(1)).unwrap();
            let fd = v.dot(&fp.sub(&fm)) / (2.0 * h);
            assert!((g[j] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{j}: {} vs {fd}", g[j]);
        }
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = MlpDenoiser::init(2, &[3], 2, 5, concepts(), &mut rng).unwrap();
        let flat = m.params_flat();
        let mut z = MlpDenoiser::zeros(2, &[3], 2, 5, concepts()).unwrap();
        z.set_params_flat(&flat).unwrap();
        assert_eq!(z, m);
        assert!(z.set_params_flat(&flat[1..]).is_err());
    }

    #[test]
    fn layer_zero_features_are_embedded_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = MlpDenoiser::init(2, &[3], 2, 5, concepts(), &mut rng).unwrap();
        let z = Latent::from_vec(vec![0.5, -0.5]);
        let f = m.extract_features(&z, ts(2, 5), Condition::concept(1), 0).unwrap();
        assert_eq!(&f[..2], z.as_slice());
        assert_eq!(f[2], 0.4);
        assert_eq!(&f[3..], m.embeddings().row(2).to_vec().as_slice());
        assert!(m.extract_features(&z, ts(2, 5), Condition::Null, 2).is_err());
    }

    #[test]
    fn skip_path_step_count_must_match() {
        let sched = make_linear_schedule(5, 0.01, 0.2).unwrap();
        let m = MlpDenoiser::zeros(2, &[3], 1, 5, concepts())
            .unwrap()
            .with_skip(SkipPath::new(&sched, 0.5).unwrap())
            .unwrap();
        let z = Latent::from_vec(vec![1.0, 2.0]);
        let out = m.mlp_forward(&z, sched.timestep(5).unwrap(), Condition::Null).unwrap();
        let a = sched.alpha(5).unwrap();
        let k = (1.0 - a).sqrt() / (a * 0.5 + 1.0 - a);
        assert!((out[1] - 2.0 * k).abs() < 1e-15);
        assert!(m.mlp_forward(&z, ts(1, 7), Condition::Null).is_err());
    }
}
