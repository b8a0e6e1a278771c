//! Sliding-window sample extraction and train/val/test splitting.

use super::{AvailabilitySeries, DynamicAttributes, IngestError, TimeGrid};
use crate::nncore::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default split fractions for train / validation / test.
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.50, 0.33, 0.17);

/// One training-window precursor: availability over the `L+1` input steps,
/// the matching dynamic-attribute window, and the `M`-step target.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// First input step index in the source series.
    pub start: usize,
    /// [L+1, N]
    pub x: Tensor<f64>,
    /// [L+1, N, w]; `w` may be 0 when no dynamic attributes exist.
    pub beta: Tensor<f64>,
    /// [M, N]
    pub y: Tensor<f64>,
}

impl WindowSample {
    /// Absolute series step of target row `j`.
    pub fn target_step(&self, l: usize, j: usize) -> usize {
        self.start + l + 1 + j
    }
}

/// All windows over a series plus the shared dimensions.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub samples: Vec<WindowSample>,
    pub l: usize,
    pub m: usize,
    pub n_stations: usize,
    pub w: usize,
    pub grid: TimeGrid,
}

/// Slide a length-`L+1` input / length-`M` target window over the series;
/// one sample per start index, `T - L - M` samples in total.
pub fn make_windows(
    avail: &AvailabilitySeries,
    dynamic: Option<&DynamicAttributes>,
    l: usize,
    m: usize,
) -> Result<WindowSet, IngestError> {
    if l < 1 || m < 1 {
        return Err(IngestError::InvalidGrid(format!("L = {l} and M = {m} must be >= 1")));
    }
    let t = avail.grid.count();
    let required = l + 1 + m;
    if t < required {
        return Err(IngestError::SeriesTooShort { t, required });
    }
    let n = avail.n_stations();
    let w = dynamic.map_or(0, |d| d.w);
    if let Some(d) = dynamic {
        if d.grid != avail.grid {
            return Err(IngestError::GridMismatch(
                "dynamic attributes are on a different grid than the availability series".into(),
            ));
        }
        if d.station_ids != avail.station_ids {
            return Err(IngestError::StationMismatch(
                "dynamic attributes cover different stations than the availability series".into(),
            ));
        }
    }

    let count = t - l - m;
    let mut samples = Vec::with_capacity(count);
    for start in 0..count {
        let mut x = Tensor::zeros([l + 1, n]);
        for step in 0..=l {
            for si in 0..n {
                x.set2(step, si, avail.value(si, start + step));
            }
        }
        let mut beta = Tensor::zeros([l + 1, n, w]);
        if let Some(d) = dynamic {
            for step in 0..=l {
                for si in 0..n {
                    for wi in 0..w {
                        beta.set3(step, si, wi, d.beta.at3(si, wi, start + step));
                    }
                }
            }
        }
        let mut y = Tensor::zeros([m, n]);
        for j in 0..m {
            for si in 0..n {
                y.set2(j, si, avail.value(si, start + l + 1 + j));
            }
        }
        samples.push(WindowSample { start, x, beta, y });
    }
    Ok(WindowSet { samples, l, m, n_stations: n, w, grid: avail.grid })
}

/// Index partition produced by the splitters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

fn check_ratios(ratios: (f64, f64, f64)) -> Result<(), IngestError> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 || ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(IngestError::BadRatios([ratios.0, ratios.1, ratios.2]));
    }
    Ok(())
}

/// Random split: seeded permutation, contiguous slices of floor(ratio*n) for
/// train and validation, remainder to test.
pub fn split_indices(
    n: usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitIndices, IngestError> {
    check_ratios(ratios)?;
    if n < 3 {
        return Err(IngestError::TooFewSamples(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(slice_split(order, n, ratios))
}

/// Leakage-free chronological split: earliest windows train, latest test.
pub fn split_indices_chronological(
    n: usize,
    ratios: (f64, f64, f64),
) -> Result<SplitIndices, IngestError> {
    check_ratios(ratios)?;
    if n < 3 {
        return Err(IngestError::TooFewSamples(n));
    }
    Ok(slice_split((0..n).collect(), n, ratios))
}

fn slice_split(order: Vec<usize>, n: usize, ratios: (f64, f64, f64)) -> SplitIndices {
    let n_train = (ratios.0 * n as f64).floor() as usize;
    let n_val = (ratios.1 * n as f64).floor() as usize;
    SplitIndices {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    }
}

/// Clone-based convenience wrapper over [`split_indices`].
pub fn split_dataset<T: Clone>(
    samples: &[T],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), IngestError> {
    let idx = split_indices(samples.len(), ratios, seed)?;
    let pick = |ids: &[usize]| ids.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&idx.train), pick(&idx.val), pick(&idx.test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::parse_timestamp_minutes;
    use std::collections::BTreeSet;

    fn series(n: usize, t: usize) -> AvailabilitySeries {
        let origin = parse_timestamp_minutes("2018-03-05 00:00").unwrap();
        AvailabilitySeries {
            grid: TimeGrid::new(origin, t).unwrap(),
            station_ids: (0..n).map(|i| format!("S{i}")).collect(),
            connector_counts: vec![1; n],
            values: Tensor::from_fn([n, t], |i| ((i % 97) as f64) / 96.0),
        }
    }

    #[test]
    fn window_count_matches_t_minus_l_minus_m() {
        let s = series(2, 10);
        let ws = make_windows(&s, None, 3, 2).unwrap();
        assert_eq!(ws.samples.len(), 5);
    }

    #[test]
    fn boundary_single_sample() {
        let s = series(2, 6);
        let ws = make_windows(&s, None, 3, 2).unwrap();
        assert_eq!(ws.samples.len(), 1);
    }

    #[test]
    fn too_short_series_reports_required_minimum() {
        let s = series(2, 5);
        assert!(matches!(
            make_windows(&s, None, 3, 2),
            Err(IngestError::SeriesTooShort { t: 5, required: 6 })
        ));
    }

    #[test]
    fn first_sample_target_rows_are_steps_after_window() {
        let s = series(3, 10);
        let l = 3;
        let m = 2;
        let ws = make_windows(&s, None, l, m).unwrap();
        let sample = &ws.samples[0];
        for j in 0..m {
            for si in 0..3 {
                assert_eq!(sample.y.at2(j, si), s.value(si, l + 1 + j));
            }
            assert_eq!(sample.target_step(l, j), l + 1 + j);
        }
    }

    #[test]
    fn targets_reconstruct_series_tail_for_single_step_horizon() {
        let s = series(2, 12);
        let l = 4;
        let ws = make_windows(&s, None, l, 1).unwrap();
        for (k, sample) in ws.samples.iter().enumerate() {
            for si in 0..2 {
                assert_eq!(sample.y.at2(0, si), s.value(si, l + 1 + k));
            }
        }
        assert_eq!(ws.samples.len(), 12 - l - 1);
    }

    #[test]
    fn split_percentages_on_100() {
        let idx = split_indices(100, SPLIT_RATIOS, 42).unwrap();
        assert_eq!(idx.train.len(), 50);
        assert_eq!(idx.val.len(), 33);
        assert_eq!(idx.test.len(), 17);
    }

    #[test]
    fn split_six_samples_floor_floor_remainder() {
        let idx = split_indices(6, SPLIT_RATIOS, 1).unwrap();
        assert_eq!((idx.train.len(), idx.val.len(), idx.test.len()), (3, 1, 2));
    }

    #[test]
    fn split_deterministic_under_seed() {
        let a = split_indices(50, SPLIT_RATIOS, 7).unwrap();
        let b = split_indices(50, SPLIT_RATIOS, 7).unwrap();
        assert_eq!(a, b);
        let c = split_indices(50, SPLIT_RATIOS, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_is_a_partition() {
        let idx = split_indices(37, SPLIT_RATIOS, 3).unwrap();
        let mut all = BTreeSet::new();
        for part in [&idx.train, &idx.val, &idx.test] {
            for &i in part {
                assert!(all.insert(i), "index {i} in two splits");
            }
        }
        assert_eq!(all.len(), 37);
        assert_eq!(idx.total(), 37);
    }

    #[test]
    fn split_rejects_bad_inputs() {
        assert!(matches!(split_indices(2, SPLIT_RATIOS, 0), Err(IngestError::TooFewSamples(2))));
        assert!(matches!(
            split_indices(10, (0.5, 0.5, 0.5), 0),
            Err(IngestError::BadRatios(_))
        ));
    }

    #[test]
    fn chronological_split_keeps_order() {
        let idx = split_indices_chronological(10, SPLIT_RATIOS).unwrap();
        assert_eq!(idx.train, vec![0, 1, 2, 3, 4]);
        assert_eq!(idx.val, vec![5, 6, 7]);
        assert_eq!(idx.test, vec![8, 9]);
    }
}
