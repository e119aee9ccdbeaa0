//! Frozen point encoder: canonical ordering, farthest-point sampling, kNN
//! grouping, a shared mini per-point MLP with max-pooling, and a small
//! transformer over the resulting patch embeddings.
//!
//! The encoder is frozen in every training stage; its parameters exist only
//! to give the rest of the stack a stable, deterministic feature extractor.

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::{Tape, Value};
use crate::nn::{multi_head_attention, AttentionIds, LinearIds, NormIds};
use crate::params::ParamStore;
use crate::pointcloud::{PointCloud, POINT_DIM};
use crate::real::Real;

/// Patch centers and grouped, re-centered points.
pub struct Grouping {
    /// m×3 center coordinates.
    pub centers: Vec<[f32; 3]>,
    /// Per center: `group_size` canonical point indices, nearest first.
    pub groups: Vec<Vec<usize>>,
}

/// Farthest-point sampling over the canonically sorted cloud, starting at
/// index 0, followed by per-center kNN by xyz distance. Ties break toward
/// the lower canonical index in both phases.
pub fn group_points(cloud: &PointCloud, cfg: &EncoderConfig) -> Result<(Grouping, PointCloud)> {
    let canon = cloud.canonicalized();
    let n = canon.len();
    if n < cfg.group_size {
        return Err(Error::dim(
            "group_points",
            format!("{n} points < group_size {}", cfg.group_size),
        ));
    }
    let m = cfg.patches.min(n);

    let dist2 = |a: [f32; 3], b: [f32; 3]| -> f64 {
        let dx = a[0] as f64 - b[0] as f64;
        let dy = a[1] as f64 - b[1] as f64;
        let dz = a[2] as f64 - b[2] as f64;
        dx * dx + dy * dy + dz * dz
    };

    // FPS: greedily take the point with the largest distance to the chosen set.
    let mut chosen = vec![0usize];
    let mut min_d: Vec<f64> = (0..n).map(|i| dist2(canon.xyz(i), canon.xyz(0))).collect();
    while chosen.len() < m {
        let mut best = 0;
        let mut best_d = -1.0;
        for (i, d) in min_d.iter().enumerate() {
            if *d > best_d {
                best_d = *d;
                best = i;
            }
        }
        chosen.push(best);
        for (i, slot) in min_d.iter_mut().enumerate() {
            let d = dist2(canon.xyz(i), canon.xyz(best));
            if d < *slot {
                *slot = d;
            }
        }
    }

    let mut centers = Vec::with_capacity(m);
    let mut groups = Vec::with_capacity(m);
    for c in &chosen {
        let cx = canon.xyz(*c);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|a, b| {
            dist2(canon.xyz(*a), cx)
                .partial_cmp(&dist2(canon.xyz(*b), cx))
                .unwrap()
                .then(a.cmp(b))
        });
        order.truncate(cfg.group_size);
        centers.push(cx);
        groups.push(order);
    }
    Ok((Grouping { centers, groups }, canon))
}

pub struct EncoderBlockIds {
    pub norm1: NormIds,
    pub attn: AttentionIds,
    pub norm2: NormIds,
    pub ffn_in: LinearIds,
    pub ffn_out: LinearIds,
}

pub struct EncoderIds {
    pub point_mlp1: LinearIds,
    pub point_mlp2: LinearIds,
    pub pos_embed: LinearIds,
    pub blocks: Vec<EncoderBlockIds>,
    pub final_norm: NormIds,
}

pub struct PointEncoder<'a> {
    pub cfg: &'a EncoderConfig,
    pub ids: &'a EncoderIds,
}

impl<'a> PointEncoder<'a> {
    /// Cloud -> patch feature sequence X (patches × hidden).
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cloud: &PointCloud,
    ) -> Result<Value> {
        let (grouping, canon) = group_points(cloud, self.cfg)?;
        let m = grouping.centers.len();

        // per-group: shared two-layer point MLP then max-pool
        let mut patch_rows = Vec::with_capacity(m);
        for g in 0..m {
            let center = grouping.centers[g];
            let mut rows = Vec::with_capacity(self.cfg.group_size * POINT_DIM);
            for idx in &grouping.groups[g] {
                let p = canon.point(*idx);
                rows.push(T::from_f64((p[0] - center[0]) as f64));
                rows.push(T::from_f64((p[1] - center[1]) as f64));
                rows.push(T::from_f64((p[2] - center[2]) as f64));
                rows.push(T::from_f64(p[3] as f64));
                rows.push(T::from_f64(p[4] as f64));
                rows.push(T::from_f64(p[5] as f64));
            }
            let pts = tape.constant(rows, self.cfg.group_size, POINT_DIM)?;
            let h = self.ids.point_mlp1.forward(tape, store, pts)?;
            let h = tape.gelu(h)?;
            let h = self.ids.point_mlp2.forward(tape, store, h)?;
            let h = tape.gelu(h)?;
            patch_rows.push(tape.max_rows(h)?);
        }
        let patches = tape.concat_rows(&patch_rows)?;

        // positional embedding of the centers
        let mut cdata = Vec::with_capacity(m * 3);
        for c in &grouping.centers {
            cdata.extend(c.iter().map(|v| T::from_f64(*v as f64)));
        }
        let centers = tape.constant(cdata, m, 3)?;
        let pos = self.ids.pos_embed.forward(tape, store, centers)?;
        let mut x = tape.add(patches, pos)?;

        for block in &self.ids.blocks {
            let normed = block.norm1.forward(tape, store, x)?;
            let attn = multi_head_attention(
                tape,
                store,
                &block.attn,
                normed,
                normed,
                self.cfg.heads,
                None,
            )?;
            x = tape.add(x, attn)?;
            let normed = block.norm2.forward(tape, store, x)?;
            let h = block.ffn_in.forward(tape, store, normed)?;
            let h = tape.gelu(h)?;
            let h = block.ffn_out.forward(tape, store, h)?;
            x = tape.add(x, h)?;
        }
        self.ids.final_norm.forward(tape, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn cfg(patches: usize, group_size: usize) -> EncoderConfig {
        EncoderConfig {
            points: 64,
            group_size,
            patches,
            hidden: 16,
            pointnet_mid: 8,
            heads: 2,
            layers: 1,
            ffn_mult: 2,
        }
    }

    fn line_cloud() -> PointCloud {
        // x = 0, 1, 2, 3 on a line
        let mut data = Vec::new();
        for x in 0..4 {
            data.extend_from_slice(&[x as f32, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
        PointCloud::new(data).unwrap()
    }

    #[test]
    fn fps_on_a_line_picks_both_ends() {
        let (grouping, canon) = group_points(&line_cloud(), &cfg(2, 2)).unwrap();
        assert_eq!(grouping.centers[0], canon.xyz(0));
        assert_eq!(grouping.centers[1], canon.xyz(3));
        assert_eq!(grouping.centers[0][0], 0.0);
        assert_eq!(grouping.centers[1][0], 3.0);
    }

    #[test]
    fn single_patch_covers_every_point() {
        let (grouping, canon) = group_points(&line_cloud(), &cfg(1, 4)).unwrap();
        assert_eq!(grouping.groups.len(), 1);
        let mut members = grouping.groups[0].clone();
        members.sort_unstable();
        assert_eq!(members, vec![0, 1, 2, 3]);
        assert_eq!(grouping.centers[0], canon.xyz(0));
    }

    #[test]
    fn too_few_points_is_an_error() {
        let cloud = PointCloud::new(vec![0.0; 6]).unwrap();
        assert!(group_points(&cloud, &cfg(1, 2)).is_err());
    }

    /// Brute-force oracle: exhaustive FPS (recompute all pairwise minima
    /// each round) and full-sort kNN, on a random 64-point cloud.
    #[test]
    fn grouping_matches_brute_force_reference() {
        let mut rng = Rng::new(404);
        let mut data = Vec::new();
        for _ in 0..64 {
            for _ in 0..3 {
                data.push(rng.uniform(-1.0, 1.0) as f32);
            }
            for _ in 0..3 {
                data.push(rng.uniform(0.0, 1.0) as f32);
            }
        }
        let cloud = PointCloud::new(data).unwrap();
        let cfg = cfg(4, 8);
        let (grouping, canon) = group_points(&cloud, &cfg).unwrap();

        let d2 = |a: [f32; 3], b: [f32; 3]| {
            let dx = a[0] as f64 - b[0] as f64;
            let dy = a[1] as f64 - b[1] as f64;
            let dz = a[2] as f64 - b[2] as f64;
            dx * dx + dy * dy + dz * dz
        };

        // reference FPS
        let n = canon.len();
        let mut ref_chosen = vec![0usize];
        while ref_chosen.len() < 4 {
            let mut best = 0;
            let mut best_d = -1.0;
            for i in 0..n {
                let mind = ref_chosen
                    .iter()
                    .map(|c| d2(canon.xyz(i), canon.xyz(*c)))
                    .fold(f64::INFINITY, f64::min);
                if mind > best_d {
                    best_d = mind;
                    best = i;
                }
            }
            ref_chosen.push(best);
        }
        let got_centers: Vec<[f32; 3]> = grouping.centers.clone();
        let ref_centers: Vec<[f32; 3]> = ref_chosen.iter().map(|c| canon.xyz(*c)).collect();
        assert_eq!(got_centers, ref_centers);

        // reference kNN
        for (g, center_idx) in ref_chosen.iter().enumerate() {
            let cx = canon.xyz(*center_idx);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|a, b| {
                d2(canon.xyz(*a), cx)
                    .partial_cmp(&d2(canon.xyz(*b), cx))
                    .unwrap()
                    .then(a.cmp(b))
            });
            order.truncate(8);
            assert_eq!(grouping.groups[g], order, "group {g}");
        }
    }
}
