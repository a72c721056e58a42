#![allow(dead_code)]

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use superand::data_io::{gen_synthetic_blobs, BlobSpec, Dataset};
use superand::encoder::{encode_backward_into, encode_forward, EncoderParams, Tensors};
use superand::image::Image;
use superand::losses::{aug_loss, and_loss, total_loss, ue_loss, BatchMembership, Membership};
use superand::memory_bank::MemoryBank;
use superand::trainer::TrainConfig;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn random_bank(rng: &mut ChaCha8Rng, n: usize, d: usize) -> MemoryBank {
    MemoryBank::from_rows(&(0..n).map(|_| unit(rng, d)).collect::<Vec<_>>()).unwrap()
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, 3, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Random batch indices (distinct) and curriculum roles with `k` neighbors.
pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, big_n: usize, k: usize) -> (Vec<usize>, BatchMembership) {
    let indices = sample(rng, big_n, n).into_vec();
    let roles = indices
        .iter()
        .map(|&i| {
            if rng.random_bool(0.5) {
                let others: Vec<usize> = (0..big_n).filter(|&j| j != i).collect();
                let pick = sample(rng, others.len(), k).into_iter().map(|t| others[t]).collect();
                Membership::Selected(pick)
            } else {
                Membership::Complement
            }
        })
        .collect();
    (indices, BatchMembership(roles))
}

/// Max absolute difference over the max magnitude of either side.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs())).max(1e-8);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Central differences of `f` with respect to every entry of `at`.
pub fn fd_rows<F: Fn(&[Vec<f64>]) -> f64>(f: F, at: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut x = at.to_vec();
    for b in 0..at.len() {
        for t in 0..at[b].len() {
            let orig = x[b][t];
            x[b][t] = orig + FD_STEP;
            let plus = f(&x);
            x[b][t] = orig - FD_STEP;
            let minus = f(&x);
            x[b][t] = orig;
            out.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    out
}

pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

/// Total loss of a batch as a function of encoder parameters, with the
/// memory, the augmented views and the curriculum held fixed.
pub struct ChainProblem {
    pub bank: MemoryBank,
    pub images: Vec<Image>,
    pub augmented: Vec<Image>,
    pub indices: Vec<usize>,
    pub membership: BatchMembership,
    pub tau: f64,
    pub w: f64,
}

impl ChainProblem {
    fn embed(params: &EncoderParams, ims: &[Image]) -> (Vec<Vec<f64>>, Vec<superand::encoder::ForwardCache>) {
        ims.iter().map(|im| encode_forward(params, im).unwrap()).unzip()
    }

    /// False when some image maps to the zero vector (all units inactive).
    pub fn well_defined(&self, params: &EncoderParams) -> bool {
        self.images.iter().chain(&self.augmented).all(|im| encode_forward(params, im).is_ok())
    }

    pub fn value(&self, params: &EncoderParams) -> f64 {
        let (v, _) = Self::embed(params, &self.images);
        let (vh, _) = Self::embed(params, &self.augmented);
        self.bundle(&v, &vh).total_value
    }

    fn bundle(&self, v: &[Vec<f64>], vh: &[Vec<f64>]) -> superand::losses::LossBundle {
        let and = and_loss(&self.bank, v, &self.indices, &self.membership, self.tau).unwrap();
        let ue = ue_loss(&self.bank, v, &self.indices, self.tau).unwrap();
        let aug = aug_loss(&self.bank, v, vh, self.tau).unwrap();
        total_loss(&and, &ue, &aug, self.w).unwrap()
    }

    pub fn gradient(&self, params: &EncoderParams) -> Tensors {
        let (v, vc) = Self::embed(params, &self.images);
        let (vh, vhc) = Self::embed(params, &self.augmented);
        let b = self.bundle(&v, &vh);
        let mut g = Tensors::zeros(&params.shape);
        for (c, gv) in vc.iter().zip(&b.grad_v) {
            encode_backward_into(params, c, gv, &mut g).unwrap();
        }
        for (c, gv) in vhc.iter().zip(&b.grad_v_hat) {
            encode_backward_into(params, c, gv, &mut g).unwrap();
        }
        g
    }

    /// (analytic, finite-difference) gradients over every parameter.
    pub fn compare(&self, params: &EncoderParams) -> (Vec<f64>, Vec<f64>) {
        let analytic: Vec<f64> = self.gradient(params).slices().iter().flat_map(|s| s.iter().copied()).collect();
        let mut p = params.clone();
        let mut numeric = Vec::with_capacity(analytic.len());
        for t in 0..6 {
            let len = p.weights.slices()[t].len();
            for j in 0..len {
                let orig = p.weights.slices()[t][j];
                p.weights.slices_mut()[t][j] = orig + FD_STEP;
                let plus = self.value(&p);
                p.weights.slices_mut()[t][j] = orig - FD_STEP;
                let minus = self.value(&p);
                p.weights.slices_mut()[t][j] = orig;
                numeric.push((plus - minus) / (2.0 * FD_STEP));
            }
        }
        (analytic, numeric)
    }
}

pub const DESK_CONFIG: &str = "\
rounds = 2
epochs_per_round = 30
batch_size = 32
base_lr = 0.03
tau = 0.07
eta = 0.5
k = 1
hidden = 64
embed_dim = 32
seed = 1
synthetic_classes = 3
synthetic_per_class = 150
synthetic_image_size = 12
synthetic_noise = 0.15
synthetic_seed = 1
holdout_per_class = 30
";

pub fn desk_config() -> TrainConfig {
    superand::data_io::parse_config(DESK_CONFIG).unwrap()
}

/// 360 training and 90 held-out blobs.
pub fn desk_data() -> (Dataset, Dataset) {
    gen_synthetic_blobs(BlobSpec {
        classes: 3,
        per_class: 150,
        image_size: 12,
        noise_sigma: 0.15,
        seed: 1,
    })
    .unwrap()
    .stratified_holdout(30)
    .unwrap()
}

/// A small config for fast end-to-end runs.
pub fn tiny_config(rounds: usize, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        rounds,
        epochs_per_round: epochs,
        batch_size: 8,
        hidden: 6,
        embed_dim: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    cfg.lr_decay_start = 2;
    cfg.lr_decay_every = 2;
    cfg.ue_weight_every = 2;
    cfg
}

pub fn tiny_data(per_class: usize) -> Dataset {
    gen_synthetic_blobs(BlobSpec {
        classes: 2,
        per_class,
        image_size: 6,
        noise_sigma: 0.1,
        seed: 3,
    })
    .unwrap()
}
