//! Random background-load injection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ids::EdgeId;
use crate::profiling::Spike;
use crate::sim::config::SpikeModel;

/// RNG stream reserved for spike placement.
pub const SPIKE_STREAM: u64 = 0x5b1e;

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    range[0] + (range[1] - range[0]) * rng.gen::<f64>()
}

/// Poisson arrivals at `model.rate` per second over `[0, horizon)`, each
/// assigned to a uniformly chosen edge with uniform duration and loads.
///
/// Per spike the draws are, in order: inter-arrival, edge, duration, CPU
/// load, memory load.
pub fn inject_spikes(model: &SpikeModel, edges: &[EdgeId], seed: u64, horizon: f64) -> Vec<Spike> {
    let mut out = Vec::new();
    if model.rate <= 0.0 || edges.is_empty() {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPIKE_STREAM);
    let mut t = 0.0;
    loop {
        let u: f64 = rng.gen();
        t += -(1.0 - u).ln() / model.rate;
        if t >= horizon {
            break;
        }
        let idx = ((rng.gen::<f64>() * edges.len() as f64) as usize).min(edges.len() - 1);
        let duration = uniform(&mut rng, model.duration);
        let cpu_load = uniform(&mut rng, model.cpu_load);
        let mem_load = uniform(&mut rng, model.mem_load);
        out.push(Spike {
            edge_id: edges[idx].clone(),
            start: t,
            duration,
            cpu_load,
            mem_load,
        });
    }
    out
}
