//! Occlusion graphs between objects of one image, depth-layering accuracy
//! and a layered ordering.
//!
//! `q` occludes `p` when the visible mask of `q` overlaps the invisible
//! mask of `p` with `IoU(SV_q, SI_p) >= threshold` and a nonempty
//! intersection. Lower depth ranks are closer to the camera.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Predictor;
use crate::maskops::{binarize, BinaryMask};
use crate::scenegen::Sample;

pub const DEFAULT_DEPTH_THRESHOLD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionPair {
    pub occluder: usize,
    pub occludee: usize,
    /// `IoU(SV_occluder, SI_occludee)`.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionGraph {
    pub image: usize,
    /// Sorted object ids.
    pub objects: Vec<usize>,
    /// Sorted by `(occluder, occludee)`.
    pub pairs: Vec<OcclusionPair>,
}

impl OcclusionGraph {
    pub fn has_edge(&self, occluder: usize, occludee: usize) -> bool {
        self.pairs
            .iter()
            .any(|e| e.occluder == occluder && e.occludee == occludee)
    }
}

/// One object of an image: id, visible mask and (predicted or true) full
/// mask, all in the image frame.
#[derive(Clone, Copy, Debug)]
pub struct ObjectMasks<'a> {
    pub id: usize,
    pub sv: &'a BinaryMask,
    pub sf: &'a BinaryMask,
}

/// `(|a ∧ b|, |a ∨ b|)` of hard masks.
fn overlap(a: &BinaryMask, b: &BinaryMask) -> (usize, usize) {
    a.bits().zip(b.bits()).fold((0, 0), |(i, u), (x, y)| {
        (i + usize::from(x && y), u + usize::from(x || y))
    })
}

pub fn infer_occlusions(
    image: usize,
    objects: &[ObjectMasks<'_>],
    threshold: f64,
) -> Result<OcclusionGraph> {
    let Some(first) = objects.first() else {
        return Ok(OcclusionGraph {
            image,
            objects: Vec::new(),
            pairs: Vec::new(),
        });
    };
    let frame = first.sv.dims();
    let mut ids = BTreeSet::new();
    for o in objects {
        for d in [o.sv.dims(), o.sf.dims()] {
            if d != frame {
                return Err(Error::ShapeMismatch {
                    expected: frame,
                    actual: d,
                });
            }
        }
        if !ids.insert(o.id) {
            return Err(Error::InvalidValue(format!(
                "object id {} appears twice in image {image}",
                o.id
            )));
        }
    }
    let sv: Vec<BinaryMask> = objects.iter().map(|o| binarize(o.sv, 0.5)).collect();
    let si = objects
        .iter()
        .zip(&sv)
        .map(|(o, v)| binarize(o.sf, 0.5).and_not(v))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for (p, si_p) in si.iter().enumerate() {
        if si_p.is_empty() {
            continue;
        }
        for (q, sv_q) in sv.iter().enumerate() {
            if q == p {
                continue;
            }
            let (inter, union) = overlap(sv_q, si_p);
            let score = inter as f64 / union.max(1) as f64;
            if inter > 0 && score >= threshold {
                pairs.push(OcclusionPair {
                    occluder: objects[q].id,
                    occludee: objects[p].id,
                    score,
                });
            }
        }
    }
    pairs.sort_by_key(|e| (e.occluder, e.occludee));
    Ok(OcclusionGraph {
        image,
        objects: ids.into_iter().collect(),
        pairs,
    })
}

/// Ground-truth pairs of one scene: silhouettes overlap, the occluder is
/// in front, and the induced overlap clears the same threshold rule.
pub fn gt_pairs(image: usize, samples: &[Sample], threshold: f64) -> Result<OcclusionGraph> {
    let objects: Vec<ObjectMasks> = samples
        .iter()
        .map(|s| ObjectMasks {
            id: s.object_id,
            sv: &s.sv,
            sf: &s.sf,
        })
        .collect();
    let mut g = infer_occlusions(image, &objects, threshold)?;
    let rank: BTreeMap<usize, &Sample> = samples.iter().map(|s| (s.object_id, s)).collect();
    g.pairs.retain(|e| {
        let (q, p) = (rank[&e.occluder], rank[&e.occludee]);
        q.depth_rank < p.depth_rank && overlap(&q.sf, &p.sf).0 > 0
    });
    Ok(g)
}

/// Occlusion graph from model predictions for the objects of one image.
pub fn predicted_graph(
    predictor: &Predictor<'_>,
    image: usize,
    samples: &[Sample],
    threshold: f64,
) -> Result<OcclusionGraph> {
    let queries: Vec<_> = samples.iter().map(|s| (&s.image, &s.sv)).collect();
    let preds = predictor.predict_many(&queries)?;
    let objects: Vec<ObjectMasks> = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| ObjectMasks {
            id: s.object_id,
            sv: &s.sv,
            sf: &p.sf,
        })
        .collect();
    infer_occlusions(image, &objects, threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageAccuracy {
    pub image: usize,
    pub correct: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    /// Mean per-image recall of directed ground-truth pairs; images without
    /// pairs are skipped, and 1.0 when none remain.
    pub accuracy: f64,
    pub images: Vec<ImageAccuracy>,
}

/// Per image, the share of ground-truth pairs predicted with the right
/// direction, averaged over images that have any.
pub fn depth_accuracy(pred: &[OcclusionGraph], gt: &[OcclusionGraph]) -> Result<DepthReport> {
    if pred.len() != gt.len() {
        return Err(Error::Mismatch(format!(
            "{} predicted graphs for {} ground-truth graphs",
            pred.len(),
            gt.len()
        )));
    }
    let mut images = Vec::with_capacity(gt.len());
    for (p, g) in pred.iter().zip(gt) {
        if p.image != g.image {
            return Err(Error::Mismatch(format!(
                "predicted graph for image {} aligned with ground truth for image {}",
                p.image, g.image
            )));
        }
        images.push(ImageAccuracy {
            image: g.image,
            correct: g
                .pairs
                .iter()
                .filter(|e| p.has_edge(e.occluder, e.occludee))
                .count(),
            total: g.pairs.len(),
        });
    }
    let scored: Vec<f64> = images
        .iter()
        .filter(|a| a.total > 0)
        .map(|a| a.correct as f64 / a.total as f64)
        .collect();
    let accuracy = if scored.is_empty() {
        1.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(DepthReport { accuracy, images })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layering {
    pub image: usize,
    /// Front to back; ids sorted within a layer.
    pub layers: Vec<Vec<usize>>,
    /// Edges removed to break cycles, in removal order.
    pub dropped: Vec<OcclusionPair>,
}

/// Edge indices of some directed cycle, if any.
fn find_cycle(nodes: &[usize], edges: &[OcclusionPair]) -> Option<Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in edges.iter().enumerate() {
        out.entry(e.occluder).or_default().push(i);
    }
    // 0 unvisited, 1 on stack, 2 done
    let mut state: BTreeMap<usize, u8> = nodes.iter().map(|&n| (n, 0)).collect();
    for &root in nodes {
        if state[&root] != 0 {
            continue;
        }
        let mut path: Vec<usize> = Vec::new();
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        state.insert(root, 1);
        while let Some(top) = stack.last_mut() {
            let (node, k) = *top;
            top.1 += 1;
            let succ = out.get(&node).map_or(&[][..], |v| v.as_slice());
            if k == succ.len() {
                state.insert(node, 2);
                stack.pop();
                path.pop();
                continue;
            }
            let ei = succ[k];
            let to = edges[ei].occludee;
            match state[&to] {
                0 => {
                    state.insert(to, 1);
                    path.push(ei);
                    stack.push((to, 0));
                }
                1 => {
                    // back edge closes a cycle through `to`
                    let start = path
                        .iter()
                        .position(|&pe| edges[pe].occluder == to)
                        .unwrap_or(path.len());
                    let mut cycle = path[start..].to_vec();
                    cycle.push(ei);
                    return Some(cycle);
                }
                _ => {}
            }
        }
    }
    None
}

/// Breaks cycles by repeatedly removing the lowest-score edge of a found
/// cycle (ties: smallest `(occluder, occludee)`), then assigns layers by
/// longest distance from the sources.
pub fn layer_order(graph: &OcclusionGraph) -> Layering {
    let mut edges = graph.pairs.clone();
    let mut dropped = Vec::new();
    while let Some(cycle) = find_cycle(&graph.objects, &edges) {
        let worst = *cycle
            .iter()
            .min_by(|&&a, &&b| {
                let (ea, eb) = (&edges[a], &edges[b]);
                ea.score
                    .total_cmp(&eb.score)
                    .then((ea.occluder, ea.occludee).cmp(&(eb.occluder, eb.occludee)))
            })
            .expect("cycles are nonempty");
        dropped.push(edges.remove(worst));
    }
    let mut indeg: BTreeMap<usize, usize> = graph.objects.iter().map(|&n| (n, 0)).collect();
    for e in &edges {
        *indeg.entry(e.occludee).or_default() += 1;
    }
    let mut layers = Vec::new();
    let mut current: Vec<usize> = indeg
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&n, _)| n)
        .collect();
    while !current.is_empty() {
        let mut next = BTreeSet::new();
        for &n in &current {
            for e in edges.iter().filter(|e| e.occluder == n) {
                let d = indeg
                    .get_mut(&e.occludee)
                    .expect("edge endpoint is an object");
                *d -= 1;
                if *d == 0 {
                    next.insert(e.occludee);
                }
            }
        }
        layers.push(current);
        current = next.into_iter().collect();
    }
    Layering {
        image: graph.image,
        layers,
        dropped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{derive_masks, generate_scene, SceneConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rect(x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(12, 12, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    fn pair(q: usize, p: usize, score: f64) -> OcclusionPair {
        OcclusionPair {
            occluder: q,
            occludee: p,
            score,
        }
    }

    fn graph(objects: &[usize], pairs: Vec<OcclusionPair>) -> OcclusionGraph {
        OcclusionGraph {
            image: 0,
            objects: objects.to_vec(),
            pairs,
        }
    }

    #[test]
    fn front_sprite_hiding_part_of_back_sprite() {
        // A: 4x4 at (0,0), fully visible. B: 4x4 at (2,2); its 2x2 corner
        // under A is hidden
        let sv_a = rect(0, 0, 4, 4);
        let sf_b = rect(2, 2, 6, 6);
        let si_b = rect(2, 2, 4, 4);
        let sv_b = sf_b.and_not(&si_b).unwrap();
        let objs = [
            ObjectMasks {
                id: 0,
                sv: &sv_a,
                sf: &sv_a,
            },
            ObjectMasks {
                id: 1,
                sv: &sv_b,
                sf: &sf_b,
            },
        ];
        let g = infer_occlusions(7, &objs, 0.05).unwrap();
        assert_eq!(g.pairs, vec![pair(0, 1, 4.0 / 16.0)]);
        assert_eq!(g.image, 7);
        assert!(infer_occlusions(7, &objs, 1.0).unwrap().pairs.is_empty());
    }

    #[test]
    fn disjoint_objects_have_no_edges_and_frames_must_agree() {
        let a = rect(0, 0, 3, 3);
        let b = rect(6, 6, 9, 9);
        let objs = [
            ObjectMasks {
                id: 0,
                sv: &a,
                sf: &a,
            },
            ObjectMasks {
                id: 1,
                sv: &b,
                sf: &b,
            },
        ];
        assert!(infer_occlusions(0, &objs, 0.05).unwrap().pairs.is_empty());
        let small = BinaryMask::zeros(3, 3);
        let bad = [
            ObjectMasks {
                id: 0,
                sv: &a,
                sf: &a,
            },
            ObjectMasks {
                id: 1,
                sv: &small,
                sf: &small,
            },
        ];
        assert!(infer_occlusions(0, &bad, 0.05).is_err());
        let dup = [
            ObjectMasks {
                id: 0,
                sv: &a,
                sf: &a,
            },
            ObjectMasks {
                id: 0,
                sv: &b,
                sf: &b,
            },
        ];
        assert!(infer_occlusions(0, &dup, 0.05).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let gt = vec![
            OcclusionGraph {
                image: 0,
                ..graph(&[0, 1, 2], vec![pair(0, 1, 0.3), pair(1, 2, 0.2)])
            },
            OcclusionGraph {
                image: 1,
                ..graph(&[0, 1, 2], vec![pair(0, 1, 0.3), pair(0, 2, 0.2)])
            },
            OcclusionGraph {
                image: 2,
                ..graph(&[0, 1], vec![pair(1, 0, 0.3)])
            },
        ];
        assert_eq!(depth_accuracy(&gt, &gt).unwrap().accuracy, 1.0);
        let pred = vec![
            gt[0].clone(),
            OcclusionGraph {
                image: 1,
                ..graph(&[0, 1, 2], vec![pair(0, 1, 0.3), pair(2, 0, 0.2)])
            },
            OcclusionGraph {
                image: 2,
                ..graph(&[0, 1], vec![pair(0, 1, 0.3)])
            },
        ];
        assert!((depth_accuracy(&pred, &gt).unwrap().accuracy - 0.5).abs() < 1e-15);
        let empty: Vec<_> = gt
            .iter()
            .map(|g| OcclusionGraph {
                pairs: vec![],
                ..g.clone()
            })
            .collect();
        assert_eq!(depth_accuracy(&empty, &gt).unwrap().accuracy, 0.0);
        let mut shifted = pred.clone();
        shifted[1].image = 5;
        assert!(depth_accuracy(&shifted, &gt).is_err());
        assert!(depth_accuracy(&pred[..2], &gt).is_err());
    }

    #[test]
    fn layering_examples() {
        let chain = graph(&[0, 1, 2], vec![pair(0, 1, 0.2), pair(1, 2, 0.2)]);
        assert_eq!(layer_order(&chain).layers, vec![vec![0], vec![1], vec![2]]);
        let none = graph(&[0, 1, 2], vec![]);
        assert_eq!(layer_order(&none).layers, vec![vec![0, 1, 2]]);
        let two = graph(&[0, 1], vec![pair(0, 1, 0.3), pair(1, 0, 0.1)]);
        let l = layer_order(&two);
        assert_eq!(l.dropped, vec![pair(1, 0, 0.1)]);
        assert_eq!(l.layers, vec![vec![0], vec![1]]);
    }

    #[test]
    fn gt_masks_reproduce_gt_pairs_on_generated_scenes() {
        for seed in 0..10 {
            let scene = generate_scene(
                &SceneConfig::default(),
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            let samples = derive_masks(&scene);
            let gt = gt_pairs(seed as usize, &samples, 0.05).unwrap();
            let objects: Vec<ObjectMasks> = samples
                .iter()
                .map(|s| ObjectMasks {
                    id: s.object_id,
                    sv: &s.sv,
                    sf: &s.sf,
                })
                .collect();
            let pred = infer_occlusions(seed as usize, &objects, 0.05).unwrap();
            assert_eq!(pred, gt);
            assert_eq!(depth_accuracy(&[pred], &[gt]).unwrap().accuracy, 1.0);
            // unoccluded objects have no incoming edges
            for s in samples.iter().filter(|s| !s.is_occluded()) {
                assert!(!gt_pairs(0, &samples, 0.05)
                    .unwrap()
                    .pairs
                    .iter()
                    .any(|e| e.occludee == s.object_id));
            }
        }
    }

    fn random_graph() -> impl Strategy<Value = OcclusionGraph> {
        proptest::collection::vec((0usize..6, 0usize..6, 1u32..100), 0..15).prop_map(|raw| {
            let mut seen = BTreeSet::new();
            let mut pairs: Vec<OcclusionPair> = raw
                .into_iter()
                .filter(|&(q, p, _)| q != p && seen.insert((q, p)))
                .map(|(q, p, s)| pair(q, p, f64::from(s) / 100.0))
                .collect();
            pairs.sort_by_key(|e| (e.occluder, e.occludee));
            graph(&[0, 1, 2, 3, 4, 5], pairs)
        })
    }

    proptest! {
        #[test]
        fn layering_is_a_valid_order_of_the_kept_edges(g in random_graph()) {
            let l = layer_order(&g);
            let mut layer_of = BTreeMap::new();
            for (i, layer) in l.layers.iter().enumerate() {
                for &n in layer {
                    prop_assert!(layer_of.insert(n, i).is_none());
                }
            }
            prop_assert_eq!(layer_of.len(), g.objects.len());
            for e in g.pairs.iter().filter(|e| !l.dropped.contains(e)) {
                prop_assert!(layer_of[&e.occluder] < layer_of[&e.occludee]);
            }
            for d in &l.dropped {
                prop_assert!(g.pairs.contains(d));
            }
        }

        #[test]
        fn accuracy_is_bounded(g in random_graph(), p in random_graph()) {
            let a = depth_accuracy(&[p], &[g.clone()]).unwrap().accuracy;
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(depth_accuracy(&[g.clone()], &[g]).unwrap().accuracy, 1.0);
        }
    }
}
