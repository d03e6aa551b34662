/// Uniform weight initializers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(±√(6 / fan_in))`, for layers feeding a ReLU.
    HeUniform,
    /// `U(±√(6 / (fan_in + fan_out)))`.
    GlorotUniform,
}

impl Init {
    pub fn bound(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Init::HeUniform => (6.0 / fan_in as f64).sqrt(),
            Init::GlorotUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }
}
