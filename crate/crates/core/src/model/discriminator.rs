use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::DiscriminatorConfig;
use crate::autodiff::{Binding, Conv2d, ParamStore, Tape, Var};
use crate::error::{CsdError, Result};

/// Fully convolutional patch critic: three stride-2 4×4 convolutions with
/// leaky ReLU, then a 1×1 convolution to one unbounded score channel at 1/8
/// of the input extent.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    stages: Vec<Conv2d>,
    score: Conv2d,
}

impl Discriminator {
    pub fn build(config: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let stages = config
            .channels
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let c = Conv2d::new(&mut store, &format!("disc.down{k}"), cin, w, 4, 2, 1, &mut rng);
                cin = w;
                c
            })
            .collect();
        let score = Conv2d::new(&mut store, "disc.score", cin, 1, 1, 1, 0, &mut rng);
        Ok(Discriminator {
            config: config.clone(),
            store,
            stages,
            score,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Score map of an N×3×H×W batch; H and W must be multiples of 8.
    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.h() % 8 != 0 || s.w() % 8 != 0 {
            return Err(CsdError::invalid(
                "discriminator",
                format!("extents {}x{} are not multiples of 8", s.h(), s.w()),
            ));
        }
        let mut h = x;
        for conv in &self.stages {
            h = conv.forward(tape, &self.store, bind, h)?;
            h = tape.leaky_relu(h, self.config.leaky_slope);
        }
        self.score.forward(tape, &self.store, bind, h)
    }
}
