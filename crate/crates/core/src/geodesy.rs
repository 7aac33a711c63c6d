//! Graph geodesics over mesh edges, geodesic balls and farthest point sampling.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use crate::error::{Error, Result};
use crate::mesh::TriMesh;

/// Single-source distances; `f64::INFINITY` marks unreachable or cut-off vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicField {
    pub source: usize,
    pub distances: Vec<f64>,
}

/// Ordered, FPS-selected members of a geodesic ball.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodSample {
    pub center: usize,
    pub members: Vec<usize>,
    pub geodesics: Vec<f64>,
}

#[derive(Copy, Clone, PartialEq)]
struct Frontier {
    dist: f64,
    vertex: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then on vertex index for a stable pop order
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra over the edge graph with Euclidean weights. Vertices farther than
/// `cutoff` keep `INFINITY`. Pass `f64::INFINITY` for an unbounded search.
pub fn geodesic_distances(mesh: &TriMesh, source: usize, cutoff: f64) -> Result<GeodesicField> {
    if source >= mesh.vertex_count() {
        return Err(Error::invalid(format!(
            "source {source} out of range for {} vertices",
            mesh.vertex_count()
        )));
    }
    if cutoff.is_nan() || cutoff <= 0.0 {
        return Err(Error::invalid("cutoff must be positive"));
    }
    let mut dist = vec![f64::INFINITY; mesh.vertex_count()];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Frontier { dist: 0.0, vertex: source });
    while let Some(Frontier { dist: d, vertex: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, len) in mesh.neighbors(u) {
            let nd = d + len;
            if nd <= cutoff && nd < dist[v] {
                dist[v] = nd;
                heap.push(Frontier { dist: nd, vertex: v });
            }
        }
    }
    Ok(GeodesicField {
        source,
        distances: dist,
    })
}

/// Cut-off Dijkstra that only touches reached vertices. Returns the settled
/// `(vertex, distance)` pairs in pop order.
pub(crate) fn sparse_distances(mesh: &TriMesh, source: usize, cutoff: f64) -> HashMap<usize, f64> {
    let mut dist: HashMap<usize, f64> = HashMap::new();
    dist.insert(source, 0.0);
    let mut heap = BinaryHeap::new();
    heap.push(Frontier { dist: 0.0, vertex: source });
    while let Some(Frontier { dist: d, vertex: u }) = heap.pop() {
        if d > dist[&u] {
            continue;
        }
        for &(v, len) in mesh.neighbors(u) {
            let nd = d + len;
            if nd <= cutoff && dist.get(&v).is_none_or(|&old| nd < old) {
                dist.insert(v, nd);
                heap.push(Frontier { dist: nd, vertex: v });
            }
        }
    }
    dist
}

/// All vertices with `d(center, v) < tau`, ascending by distance then index.
/// The center is always the first entry.
pub fn geodesic_ball(mesh: &TriMesh, center: usize, tau: f64) -> Result<Vec<(usize, f64)>> {
    if center >= mesh.vertex_count() {
        return Err(Error::invalid(format!("center {center} out of range")));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid("tau must be positive"));
    }
    let mut ball: Vec<(usize, f64)> = sparse_distances(mesh, center, tau)
        .into_iter()
        .filter(|&(_, d)| d < tau)
        .collect();
    ball.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(ball)
}

/// Greedy farthest point sampling over `candidates`.
///
/// The first pick is `seed`; every later pick maximises the minimum
/// `metric` distance to the picks so far, ties going to the lowest vertex
/// index. When fewer than `k` candidates exist the result is padded by
/// cycling through the picks in order.
pub fn farthest_point_sample<F>(
    candidates: &[usize],
    mut metric: F,
    k: usize,
    seed: usize,
) -> Result<Vec<usize>>
where
    F: FnMut(usize, usize) -> f64,
{
    if candidates.is_empty() {
        return Err(Error::invalid("farthest point sampling needs candidates"));
    }
    if !candidates.contains(&seed) {
        return Err(Error::invalid(format!("seed {seed} is not a candidate")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut picked = Vec::with_capacity(k);
    let mut taken = vec![false; candidates.len()];
    let mut min_dist = vec![f64::INFINITY; candidates.len()];
    let mut current = seed;
    loop {
        let slot = candidates.iter().position(|&c| c == current).expect("candidate");
        taken[slot] = true;
        picked.push(current);
        if picked.len() == k || picked.len() == candidates.len() {
            break;
        }
        let mut best: Option<(f64, usize)> = None;
        for (s, &c) in candidates.iter().enumerate() {
            if taken[s] {
                continue;
            }
            min_dist[s] = min_dist[s].min(metric(current, c));
            let better = match best {
                None => true,
                Some((bd, bc)) => min_dist[s] > bd || (min_dist[s] == bd && c < bc),
            };
            if better {
                best = Some((min_dist[s], c));
            }
        }
        current = best.expect("an untaken candidate remains").1;
    }
    let selected = picked.len();
    for i in selected..k {
        picked.push(picked[i % selected]);
    }
    Ok(picked)
}

/// Geodesic ball around `center` reduced to `k` members by FPS seeded at the
/// center. Pairwise distances between ball members are exact graph geodesics
/// (any two members are within `2 * tau` of each other through the center).
pub fn sample_neighborhood(
    mesh: &TriMesh,
    center: usize,
    tau: f64,
    k: usize,
) -> Result<NeighborhoodSample> {
    let ball = geodesic_ball(mesh, center, tau)?;
    let from_center: HashMap<usize, f64> = ball.iter().copied().collect();
    let candidates: Vec<usize> = ball.iter().map(|&(v, _)| v).collect();
    let mut fields: HashMap<usize, HashMap<usize, f64>> = HashMap::new();
    fields.insert(center, from_center.clone());
    let members = farthest_point_sample(
        &candidates,
        |a, b| {
            let field = fields
                .entry(a)
                .or_insert_with(|| sparse_distances(mesh, a, 2.0 * tau));
            field.get(&b).copied().unwrap_or(f64::INFINITY)
        },
        k,
        center,
    )?;
    let geodesics = members.iter().map(|m| from_center[m]).collect();
    Ok(NeighborhoodSample {
        center,
        members,
        geodesics,
    })
}

/// All-pairs graph geodesics by repeated Dijkstra, row-major `n x n`.
pub fn all_pairs(mesh: &TriMesh) -> Vec<f64> {
    use rayon::prelude::*;
    let n = mesh.vertex_count();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|s| {
            geodesic_distances(mesh, s, f64::INFINITY)
                .expect("valid source")
                .distances
        })
        .collect();
    rows.concat()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{shapes, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Collinear chain 0-1-2-3 with unit spacing, as two slivers per segment.
    fn chain(n: usize) -> TriMesh {
        let mut v: Vec<Vec3> = (0..n).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let off = v.len();
        // far-away apex per segment so its edges never shorten the chain
        let mut f = Vec::new();
        for i in 0..n - 1 {
            v.push(Vec3::new(i as f64 + 0.5, 100.0, 0.0));
            f.push([i, i + 1, off + i]);
        }
        TriMesh::new(v, f).unwrap()
    }

    fn bellman_ford(mesh: &TriMesh, s: usize) -> Vec<f64> {
        let mut d = vec![f64::INFINITY; mesh.vertex_count()];
        d[s] = 0.0;
        for _ in 0..mesh.vertex_count() {
            for e in mesh.edges() {
                if d[e.a] + e.length < d[e.b] {
                    d[e.b] = d[e.a] + e.length;
                }
                if d[e.b] + e.length < d[e.a] {
                    d[e.a] = d[e.b] + e.length;
                }
            }
        }
        d
    }

    #[test]
    fn chain_distances() {
        let m = chain(4);
        let f = geodesic_distances(&m, 0, f64::INFINITY).unwrap();
        assert_eq!(&f.distances[..4], &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn chain_ball() {
        let m = chain(4);
        assert_eq!(geodesic_ball(&m, 0, 1.5).unwrap(), vec![(0, 0.0), (1, 1.0)]);
        let all = geodesic_ball(&m, 0, 1e12).unwrap();
        assert_eq!(all.len(), m.vertex_count());
    }

    #[test]
    fn cutoff_leaves_infinity() {
        let m = chain(4);
        let f = geodesic_distances(&m, 0, 1.5).unwrap();
        assert_eq!(f.distances[1], 1.0);
        assert!(f.distances[2].is_infinite());
    }

    #[test]
    fn dijkstra_matches_bellman_ford_exactly() {
        for seed in 0..5 {
            let m = shapes::deform(&shapes::icosphere(1), 0.2, seed);
            for s in [0, 7, 41] {
                let d = geodesic_distances(&m, s, f64::INFINITY).unwrap().distances;
                assert_eq!(d, bellman_ford(&m, s));
            }
        }
    }

    #[test]
    fn field_respects_edge_triangle_inequality() {
        let m = shapes::bumpy_sphere(2, 0.1, 3);
        let d = geodesic_distances(&m, 5, f64::INFINITY).unwrap().distances;
        assert_eq!(d[5], 0.0);
        for e in m.edges() {
            assert!((d[e.a] - d[e.b]).abs() <= e.length + 1e-12);
        }
    }

    #[test]
    fn distances_are_symmetric() {
        let m = shapes::bumpy_sphere(2, 0.1, 4);
        let d0 = geodesic_distances(&m, 3, f64::INFINITY).unwrap().distances;
        for t in [10, 77, 150] {
            let dt = geodesic_distances(&m, t, f64::INFINITY).unwrap().distances;
            assert!((d0[t] - dt[3]).abs() < 1e-9);
        }
    }

    #[test]
    fn fps_on_a_line() {
        let xs: [f64; 5] = [0.0, 1.0, 2.0, 3.0, 4.0];
        let cands = [0, 1, 2, 3, 4];
        let out = farthest_point_sample(&cands, |a, b| (xs[a] - xs[b]).abs(), 3, 0).unwrap();
        assert_eq!(out, vec![0, 4, 2]);
    }

    #[test]
    fn fps_exhaustion_and_padding() {
        let xs: [f64; 3] = [0.0, 1.0, 5.0];
        let cands = [2, 0, 1];
        let perm = farthest_point_sample(&cands, |a, b| (xs[a] - xs[b]).abs(), 3, 1).unwrap();
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
        let padded = farthest_point_sample(&cands, |a, b| (xs[a] - xs[b]).abs(), 7, 1).unwrap();
        assert_eq!(&padded[3..], &[perm[0], perm[1], perm[2], perm[0]]);
        assert!(farthest_point_sample(&[], |_, _| 0.0, 3, 0).is_err());
        assert!(farthest_point_sample(&cands, |_, _| 0.0, 3, 9).is_err());
    }

    #[test]
    fn fps_ties_go_to_lowest_index() {
        let cands = [3, 1, 2, 0];
        let out = farthest_point_sample(&cands, |a, b| if a == b { 0.0 } else { 1.0 }, 4, 2).unwrap();
        assert_eq!(out, vec![2, 0, 1, 3]);
    }

    #[test]
    fn fps_min_distance_sequence_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..40)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let cands: Vec<usize> = (0..40).collect();
        let out = farthest_point_sample(&cands, |a, b| (pts[a] - pts[b]).norm(), 15, 0).unwrap();
        let mut prev = f64::INFINITY;
        for i in 1..out.len() {
            let md = out[..i]
                .iter()
                .map(|&p| (pts[p] - pts[out[i]]).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(md <= prev);
            prev = md;
        }
    }

    #[test]
    fn neighborhood_contains_center_first() {
        let m = shapes::bumpy_sphere(2, 0.1, 5);
        let s = sample_neighborhood(&m, 17, 0.6, 8).unwrap();
        assert_eq!(s.members[0], 17);
        assert_eq!(s.geodesics[0], 0.0);
        assert!(s.geodesics.iter().all(|&g| g < 0.6));
        let field = geodesic_distances(&m, 17, f64::INFINITY).unwrap();
        for (m, g) in s.members.iter().zip(&s.geodesics) {
            assert_eq!(field.distances[*m], *g);
        }
    }
}
