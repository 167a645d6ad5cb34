//! Named parameter storage with a trunk / embodiment-specific partition, init
//! helpers, and a decoupled-weight-decay adaptive-moment optimizer.

use super::{Scalar, Tensor};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Transfer partition: trunk parameters survive embodiment changes,
/// embodiment-specific ones are reinitialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Trunk,
    EmbodimentSpecific,
}

#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Array2<F>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let slot = self.params.len();
        self.index.insert(name.to_string(), slot);
        self.params.push(Param {
            name: name.to_string(),
            group,
            value,
        });
        slot
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn slot(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, slot: usize) -> &Param<F> {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Param<F> {
        &mut self.params[slot]
    }

    pub fn by_name(&self, name: &str) -> &Param<F> {
        self.get(self.slot(name))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    /// Leaf tensor for one step's graph; gradients gather by slot afterwards.
    pub fn leaf(&self, slot: usize) -> Tensor<F> {
        Tensor::leaf(self.params[slot].value.clone(), slot)
    }

    pub fn leaf_named(&self, name: &str) -> Tensor<F> {
        self.leaf(self.slot(name))
    }

    /// Bit-level checksum over one group, keyed by name so parameter order
    /// cannot mask a mismatch.
    pub fn checksum(&self, group: ParamGroup) -> u64 {
        let mut names: Vec<&Param<F>> =
            self.params.iter().filter(|p| p.group == group).collect();
        names.sort_by(|a, b| a.name.cmp(&b.name));
        let mut acc: u64 = 0xcbf29ce484222325;
        for p in names {
            for b in p.name.as_bytes() {
                acc = (acc ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in p.value.iter() {
                acc = (acc ^ v.to_f64().to_bits()).wrapping_mul(0x100000001b3);
            }
        }
        acc
    }

    /// Same parameters at another precision (used to run a 64-bit oracle at
    /// the 32-bit parameter values).
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(&p.name, p.group, p.value.mapv(|v| G::from_f64(v.to_f64())));
        }
        out
    }
}

/// Collect gradients from a finished backward pass into slot order.
pub fn gather_grads<F: Scalar>(store: &ParamStore<F>, leafs: &[Tensor<F>]) -> Vec<Option<Array2<F>>> {
    let mut grads: Vec<Option<Array2<F>>> = vec![None; store.len()];
    for leaf in leafs {
        if let (Some(slot), Some(g)) = (leaf.param_slot(), leaf.grad()) {
            match &mut grads[slot] {
                Some(acc) => *acc = &*acc + &g,
                none => *none = Some(g),
            }
        }
    }
    grads
}

/// Truncated normal init (std 0.02, resampled beyond two sigmas).
pub fn init_trunc_normal<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| {
        loop {
            // Box-Muller.
            let u1: f64 = rng.gen::<f64>().max(1e-300);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                return F::from_f64(z * std);
            }
        }
    })
}

pub fn init_zeros<F: Scalar>(rows: usize, cols: usize) -> Array2<F> {
    Array2::from_elem((rows, cols), F::ZERO)
}

pub fn init_ones<F: Scalar>(rows: usize, cols: usize) -> Array2<F> {
    Array2::from_elem((rows, cols), F::ONE)
}

/// Adam with decoupled weight decay. Moment buffers are kept in f64 so the
/// update rule is precision-independent.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new<F: Scalar>(store: &ParamStore<F>, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: store
                .iter()
                .map(|p| Array2::zeros(p.value.dim()))
                .collect(),
            v: store
                .iter()
                .map(|p| Array2::zeros(p.value.dim()))
                .collect(),
        }
    }

    /// One update over every slot with a gradient. Weight decay applies
    /// multiplicatively to the parameter, decoupled from the moments, and
    /// also to slots whose gradient is zero this step.
    pub fn step<F: Scalar>(&mut self, store: &mut ParamStore<F>, grads: &[Option<Array2<F>>]) {
        assert_eq!(grads.len(), store.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for slot in 0..grads.len() {
            let Some(g) = &grads[slot] else { continue };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let p = store.get_mut(slot);
            for (i, pv) in p.value.iter_mut().enumerate() {
                let gi = g.as_slice().unwrap()[i].to_f64();
                let mi = &mut m.as_slice_mut().unwrap()[i];
                let vi = &mut v.as_slice_mut().unwrap()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                let mut x = pv.to_f64();
                x -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * x);
                *pv = F::from_f64(x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;

    #[test]
    fn store_round_trip_and_checksum() {
        let mut s: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        s.add("trunk.w", ParamGroup::Trunk, init_trunc_normal(&mut rng, 4, 4, 0.02));
        s.add("tok.w", ParamGroup::EmbodimentSpecific, init_ones(2, 2));
        let c1 = s.checksum(ParamGroup::Trunk);
        // Changing an embodiment-specific param leaves the trunk checksum.
        s.get_mut(1).value[[0, 0]] = 5.0;
        assert_eq!(c1, s.checksum(ParamGroup::Trunk));
        // Changing a trunk param changes it.
        s.get_mut(0).value[[0, 0]] += 1.0;
        assert_ne!(c1, s.checksum(ParamGroup::Trunk));
    }

    #[test]
    fn trunc_normal_bounded_and_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(2);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a: Array2<f64> = init_trunc_normal(&mut r1, 50, 50, 0.02);
        let b: Array2<f64> = init_trunc_normal(&mut r2, 50, 50, 0.02);
        assert_eq!(a, b);
        for &v in &a {
            assert!(v.abs() <= 0.04 + 1e-12);
        }
        let std = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.005, "std {std}");
    }

    #[test]
    fn adamw_zero_grad_is_pure_decay() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.add("w", ParamGroup::Trunk, arr2(&[[2.0]]));
        let mut opt = AdamW::new(&s, 0.1, 0.5);
        opt.step(&mut s, &[Some(arr2(&[[0.0]]))]);
        // m = v = 0 so the adaptive term vanishes; only decay acts:
        // x' = x - lr * wd * x = 2.0 * (1 - 0.05).
        assert!((s.get(0).value[[0, 0]] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        // minimize (w - 3)^2 by feeding grad = 2(w - 3).
        let mut s: ParamStore<f64> = ParamStore::new();
        s.add("w", ParamGroup::Trunk, arr2(&[[0.0]]));
        let mut opt = AdamW::new(&s, 0.05, 0.0);
        for _ in 0..500 {
            let w = s.get(0).value[[0, 0]];
            opt.step(&mut s, &[Some(arr2(&[[2.0 * (w - 3.0)]]))]);
        }
        assert!((s.get(0).value[[0, 0]] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn skipped_slot_untouched() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.add("a", ParamGroup::Trunk, arr2(&[[1.0]]));
        s.add("b", ParamGroup::Trunk, arr2(&[[1.0]]));
        let mut opt = AdamW::new(&s, 0.1, 0.1);
        opt.step(&mut s, &[Some(arr2(&[[1.0]])), None]);
        assert_ne!(s.get(0).value[[0, 0]], 1.0);
        assert_eq!(s.get(1).value[[0, 0]], 1.0);
    }

    #[test]
    fn cast_preserves_values() {
        let mut s: ParamStore<f32> = ParamStore::new();
        s.add("w", ParamGroup::Trunk, arr2(&[[1.5f32, -0.25]]));
        let d: ParamStore<f64> = s.cast();
        assert_eq!(d.by_name("w").value[[0, 1]], -0.25);
        assert_eq!(d.by_name("w").group, ParamGroup::Trunk);
    }

    #[test]
    fn gather_grads_accumulates_shared_leafs() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.add("w", ParamGroup::Trunk, arr2(&[[3.0]]));
        let l1 = s.leaf(0);
        let l2 = s.leaf(0);
        let sum = crate::nn::add(&l1, &l2);
        crate::nn::backward(&sum);
        let grads = gather_grads(&s, &[l1, l2]);
        assert_eq!(grads[0].as_ref().unwrap()[[0, 0]], 2.0);
    }
}
