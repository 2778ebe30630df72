use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random sub-streams, all derived from one master seed so data
/// generation, parameter init and shuffling can be varied independently.
#[derive(Copy, Clone, Debug)]
pub(crate) enum Stream {
    Data = 1,
    Init = 2,
    Shuffle = 3,
    /// Cohort-level structure shared by every subject.
    SharedStructure = 4,
}

pub(crate) fn substream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Indices of `scores` sorted by descending value, ties broken by smaller
/// index. Both pooling and the distance losses rank through this so the
/// kept set and the top-k score group always agree.
pub(crate) fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| a.cmp(&b))
    });
    idx
}

/// Mean and population standard deviation.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
