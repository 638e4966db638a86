//! Embedding and single-shot ranking evaluation (CMC curves and mAP).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::Rng;

use crate::dataset::DescriptorSet;
use crate::error::{check_dim, Error, Result};
use crate::net::Mode;
use crate::trainer::TrainState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    /// Euclidean distance between ℓ2-normalized embeddings.
    #[default]
    Euclidean,
    /// `1 − cos` between embeddings.
    Cosine,
}

/// Embeds images through the Fisher encoding and the network (eval mode),
/// one ℓ2-normalized row per image.
pub fn embed(state: &TrainState, images: &[DescriptorSet]) -> Result<DMatrix<f64>> {
    state.check_ready()?;
    let mut fvs = DMatrix::zeros(images.len(), state.fv_dim());
    for (i, im) in images.iter().enumerate() {
        fvs.set_row(i, &state.encode(im)?.transpose());
    }
    if images.is_empty() {
        return Ok(DMatrix::zeros(0, state.net.output_dim()));
    }
    let (out, _) = state.net.forward(&fvs, Mode::Eval, 0)?;
    Ok(l2_normalize_rows(&out))
}

/// Scales each row to unit ℓ2 norm; zero rows stay zero.
pub fn l2_normalize_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Probe × gallery distance matrix.
pub fn distance_matrix(probe: &DMatrix<f64>, gallery: &DMatrix<f64>, metric: Metric) -> Result<DMatrix<f64>> {
    check_dim("gallery embedding width", probe.ncols(), gallery.ncols())?;
    let (p, g) = match metric {
        Metric::Euclidean => (probe.clone(), gallery.clone()),
        Metric::Cosine => (l2_normalize_rows(probe), l2_normalize_rows(gallery)),
    };
    Ok(DMatrix::from_fn(p.nrows(), g.nrows(), |i, j| {
        let dot = p.row(i).dot(&g.row(j));
        match metric {
            Metric::Euclidean => libm::sqrt((p.row(i) - g.row(j)).norm_squared()),
            Metric::Cosine => 1.0 - dot,
        }
    }))
}

/// Gallery positions ordered by ascending distance; ties go to the lower index.
pub fn rank_order(distances: &[f64], subset: &[usize]) -> Vec<usize> {
    let mut order = subset.to_vec();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order
}

/// Picks one gallery item per identity, uniformly at random, identities in
/// ascending label order.
pub fn single_shot_gallery<R: Rng>(gallery_labels: &[usize], rng: &mut R) -> Vec<usize> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in gallery_labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    by_id
        .values()
        .map(|members| members[rng.random_range(0..members.len())])
        .collect()
}

/// Per-probe ranking against the full gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRanking {
    pub probe: usize,
    pub gallery_order: Vec<usize>,
    /// Distances in `gallery_order`.
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    /// `cmc[k]` is the fraction of probes whose identity appears within the
    /// top `k + 1` of the single-shot gallery, averaged over trials.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub trials: usize,
    pub rankings: Vec<ProbeRanking>,
}

impl RankingResult {
    /// CMC value at 1-based rank `k` (saturating at the gallery size).
    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc.is_empty() || k == 0 {
            return 0.0;
        }
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }
}

fn check_probe_coverage(probe_labels: &[usize], gallery_labels: &[usize]) -> Result<()> {
    let gallery: BTreeSet<usize> = gallery_labels.iter().copied().collect();
    let missing: BTreeSet<usize> = probe_labels.iter().filter(|l| !gallery.contains(l)).copied().collect();
    if !missing.is_empty() {
        return Err(Error::Protocol(format!(
            "probe identities absent from the gallery: {missing:?}"
        )));
    }
    Ok(())
}

/// Match counts of a single trial on a fixed single-shot gallery `subset`
/// (one gallery index per identity): entry `k` counts probes whose identity
/// is within the top `k + 1`.
pub fn cmc_counts(
    distances: &DMatrix<f64>,
    probe_labels: &[usize],
    gallery_labels: &[usize],
    subset: &[usize],
) -> Result<Vec<u64>> {
    check_dim("probe labels", distances.nrows(), probe_labels.len())?;
    check_dim("gallery labels", distances.ncols(), gallery_labels.len())?;
    let mut counts = alloc::vec![0u64; subset.len()];
    for (p, &label) in probe_labels.iter().enumerate() {
        let row: Vec<f64> = distances.row(p).iter().copied().collect();
        let order = rank_order(&row, subset);
        let r = order
            .iter()
            .position(|&g| gallery_labels[g] == label)
            .ok_or_else(|| Error::Protocol(format!("probe {p} (identity {label}) has no gallery match")))?;
        for c in counts.iter_mut().skip(r) {
            *c += 1;
        }
    }
    Ok(counts)
}

/// CMC of a single trial on a fixed single-shot gallery `subset`.
pub fn cmc_single_trial(
    distances: &DMatrix<f64>,
    probe_labels: &[usize],
    gallery_labels: &[usize],
    subset: &[usize],
) -> Result<Vec<f64>> {
    let n = probe_labels.len().max(1) as f64;
    Ok(cmc_counts(distances, probe_labels, gallery_labels, subset)?
        .into_iter()
        .map(|c| c as f64 / n)
        .collect())
}

/// The single-shot galleries drawn by [`cmc_evaluate`], one per trial.
pub fn single_shot_trials(gallery_labels: &[usize], trials: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = crate::seeded_rng(seed, 0xc3c);
    (0..trials)
        .map(|_| single_shot_gallery(gallery_labels, &mut rng))
        .collect()
}

/// Single-shot CMC averaged over `trials` seeded gallery samplings, plus mAP
/// over the full gallery.
pub fn cmc_evaluate(
    probe: &DMatrix<f64>,
    probe_labels: &[usize],
    gallery: &DMatrix<f64>,
    gallery_labels: &[usize],
    trials: usize,
    seed: u64,
    metric: Metric,
) -> Result<RankingResult> {
    if trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    if probe_labels.is_empty() {
        return Err(Error::Protocol("no probes".into()));
    }
    check_probe_coverage(probe_labels, gallery_labels)?;
    let d = distance_matrix(probe, gallery, metric)?;
    let mut total: Vec<u64> = Vec::new();
    for subset in single_shot_trials(gallery_labels, trials, seed) {
        let counts = cmc_counts(&d, probe_labels, gallery_labels, &subset)?;
        if total.is_empty() {
            total = counts;
        } else {
            total.iter_mut().zip(counts).for_each(|(a, b)| *a += b);
        }
    }
    let denom = (probe_labels.len() * trials) as f64;
    let cmc = total.into_iter().map(|c| c as f64 / denom).collect();

    let all: Vec<usize> = (0..gallery_labels.len()).collect();
    let rankings = (0..probe_labels.len())
        .map(|p| {
            let row: Vec<f64> = d.row(p).iter().copied().collect();
            let gallery_order = rank_order(&row, &all);
            ProbeRanking {
                probe: p,
                distances: gallery_order.iter().map(|&g| row[g]).collect(),
                gallery_order,
            }
        })
        .collect();
    let map = map_from_distances(&d, probe_labels, gallery_labels)?.map;
    Ok(RankingResult {
        cmc,
        map,
        trials,
        rankings,
    })
}

/// Average precision of one ranked list given relevance flags.
pub fn average_precision(relevant_in_order: &[bool]) -> Option<f64> {
    let total = relevant_in_order.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant_in_order.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub map: f64,
    pub per_probe: Vec<Option<f64>>,
    /// Probes without any relevant gallery item (left out of the mean).
    pub excluded: Vec<usize>,
}

fn map_from_distances(d: &DMatrix<f64>, probe_labels: &[usize], gallery_labels: &[usize]) -> Result<MapResult> {
    check_dim("probe labels", d.nrows(), probe_labels.len())?;
    check_dim("gallery labels", d.ncols(), gallery_labels.len())?;
    let all: Vec<usize> = (0..gallery_labels.len()).collect();
    let per_probe: Vec<Option<f64>> = probe_labels
        .iter()
        .enumerate()
        .map(|(p, &label)| {
            let row: Vec<f64> = d.row(p).iter().copied().collect();
            let rel: Vec<bool> = rank_order(&row, &all).iter().map(|&g| gallery_labels[g] == label).collect();
            average_precision(&rel)
        })
        .collect();
    let excluded: Vec<usize> = per_probe
        .iter()
        .enumerate()
        .filter(|(_, ap)| ap.is_none())
        .map(|(i, _)| i)
        .collect();
    if !excluded.is_empty() {
        log::warn!("{} probes have no relevant gallery item and are excluded from mAP", excluded.len());
    }
    let scored: Vec<f64> = per_probe.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::Protocol("no probe has a relevant gallery item".into()));
    }
    Ok(MapResult {
        map: scored.iter().sum::<f64>() / scored.len() as f64,
        per_probe,
        excluded,
    })
}

/// Mean average precision over the full gallery.
pub fn map_evaluate(
    probe: &DMatrix<f64>,
    probe_labels: &[usize],
    gallery: &DMatrix<f64>,
    gallery_labels: &[usize],
    metric: Metric,
) -> Result<MapResult> {
    let d = distance_matrix(probe, gallery, metric)?;
    map_from_distances(&d, probe_labels, gallery_labels)
}

/// Probe/gallery split of a test set: probes come from the lowest camera id
/// and the gallery from every other camera. With a single camera, one
/// seeded image per identity becomes the probe and the rest the gallery.
/// Identities that end up on only one side are dropped from the probes.
pub fn cross_camera_split(cameras: &[u32], labels: &[usize], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    check_dim("camera ids", labels.len(), cameras.len())?;
    let Some(&probe_cam) = cameras.iter().min() else {
        return Err(Error::Protocol("empty test set".into()));
    };
    let multi_camera = cameras.iter().any(|&c| c != probe_cam);
    let (probe, gallery): (Vec<usize>, Vec<usize>) = if multi_camera {
        (0..labels.len()).partition(|&i| cameras[i] == probe_cam)
    } else {
        log::warn!("test set has one camera; using a seeded within-camera split");
        let mut rng = crate::seeded_rng(seed, 0x5b1);
        let chosen: BTreeSet<usize> = single_shot_gallery(labels, &mut rng).into_iter().collect();
        (0..labels.len()).partition(|i| chosen.contains(i))
    };
    let gallery_ids: BTreeSet<usize> = gallery.iter().map(|&i| labels[i]).collect();
    let probe: Vec<usize> = probe.into_iter().filter(|&i| gallery_ids.contains(&labels[i])).collect();
    if probe.is_empty() {
        return Err(Error::Protocol("no probe identity appears in the gallery".into()));
    }
    Ok((probe, gallery))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn single_probe_rank_two() {
        let d = DMatrix::from_row_slice(1, 3, &[0.5, 0.2, 0.9]);
        let cmc = cmc_single_trial(&d, &[7], &[7, 3, 8], &[0, 1, 2]).unwrap();
        assert_eq!(cmc, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        assert_eq!(rank_order(&[1.0, 0.5, 0.5, 0.1], &[0, 1, 2, 3]), vec![3, 1, 2, 0]);
        let d = DMatrix::from_row_slice(1, 2, &[0.3, 0.3]);
        assert_eq!(cmc_single_trial(&d, &[1], &[0, 1], &[0, 1]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn missing_identity_is_a_protocol_error() {
        let p = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let g = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let err = cmc_evaluate(&p, &[4], &g, &[5], 1, 0, Metric::Euclidean).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&[true, false, true]), Some((1.0 + 2.0 / 3.0) / 2.0));
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn map_excludes_probes_without_matches() {
        let p = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let g = DMatrix::from_row_slice(2, 1, &[0.0, 5.0]);
        let r = map_evaluate(&p, &[1, 9], &g, &[1, 2], Metric::Euclidean).unwrap();
        assert_eq!(r.excluded, vec![1]);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn cross_camera_split_uses_lowest_camera_for_probes() {
        let cams = [2, 1, 2, 1, 3];
        let labels = [0, 0, 1, 1, 2];
        let (p, g) = cross_camera_split(&cams, &labels, 0).unwrap();
        assert_eq!(p, vec![1, 3]);
        assert_eq!(g, vec![0, 2, 4]);
    }

    #[test]
    fn single_camera_fallback_is_seeded() {
        let cams = [0; 6];
        let labels = [0, 0, 0, 1, 1, 1];
        let a = cross_camera_split(&cams, &labels, 3).unwrap();
        assert_eq!(a, cross_camera_split(&cams, &labels, 3).unwrap());
        assert_eq!(a.0.len(), 2);
        assert_eq!(a.1.len(), 4);
    }

    #[test]
    fn cosine_ignores_scale() {
        let p = DMatrix::from_row_slice(1, 2, &[3.0, 0.0]);
        let g = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 10.0, 0.0]);
        let d = distance_matrix(&p, &g, Metric::Cosine).unwrap();
        assert!((d[(0, 0)] - 1.0).abs() < 1e-15 && d[(0, 1)].abs() < 1e-15);
    }
}
