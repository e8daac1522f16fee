//! Network invocation counters used to verify inference cost.

/// One count per batched forward pass, whatever the batch size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub denoiser: usize,
    pub encoder: usize,
    pub actor: usize,
    pub critic: usize,
}

impl CallCounts {
    pub fn total(&self) -> usize {
        self.denoiser + self.encoder + self.actor + self.critic
    }
}
