//! Activation volumes and blue-noise sampling keys.
//!
//! Every selected channel map is upsampled (nearest neighbour) to a common
//! `H x W` resolution and stacked along depth, giving an `(H, W, L)` volume.
//! A [`SamplingKey`] fixes `D` voxel coordinates of that volume drawn with
//! Bridson's Poisson-disk algorithm. The key is the secret that decides
//! which activations the detector observes, so key files must be withheld
//! from anyone who could mount an attack against the monitored network.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{NumArray, SeededRng};
use crate::record::{ActivationRecord, LayerSelection};

/// Default number of candidates drawn around each active point.
pub const DEFAULT_K_ATTEMPTS: usize = 30;

/// Out-of-domain candidates are redrawn up to this many times per attempt.
const MAX_DRAWS_PER_ATTEMPT: usize = 64;

/// Nearest-neighbour upsampling of an `(h, w)` map to `(H, W)`.
///
/// `out[i, j] = map[floor(i * h / H), floor(j * w / W)]`.
pub fn upsample_nn(map: &NumArray, target: (usize, usize)) -> Result<NumArray> {
    let (h, w) = match *map.shape() {
        [h, w] => (h, w),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "expected a 2-D map, got shape {:?}",
                map.shape()
            )))
        }
    };
    let (th, tw) = target;
    if h > th || w > tw {
        return Err(Error::DownsamplingUnsupported {
            src: (h, w),
            target,
        });
    }
    let src = map.data();
    let data = (0..th * tw)
        .map(|idx| {
            let (i, j) = (idx / tw, idx % tw);
            src[(i * h / th) * w + j * w / tw]
        })
        .collect();
    NumArray::new(vec![th, tw], data)
}

/// Stacks the selected channel maps of `record` into an `(H, W, L)` volume.
///
/// Depth follows layer order, then channel order.
pub fn assemble_volume(
    record: &ActivationRecord,
    target: (usize, usize),
    selection: LayerSelection,
) -> Result<NumArray> {
    let (th, tw) = target;
    let depth: usize = record
        .layers
        .iter()
        .filter(|l| selection.matches(&l.name))
        .map(|l| l.channels)
        .sum();
    if depth == 0 {
        return Err(Error::EmptySelection);
    }
    let mut out = vec![0.0f32; th * tw * depth];
    let mut l = 0;
    for layer in record.layers.iter().filter(|l| selection.matches(&l.name)) {
        for c in 0..layer.channels {
            let map = NumArray::new(
                vec![layer.height, layer.width],
                layer.channel(c).to_vec(),
            )?;
            let up = upsample_nn(&map, target)?;
            for (px, v) in up.data().iter().enumerate() {
                out[px * depth + l] = *v;
            }
            l += 1;
        }
    }
    NumArray::new(vec![th, tw, depth], out)
}

/// A fixed set of voxel coordinates in an `(H, W, L)` volume.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SamplingKey {
    pub seed: u64,
    #[cfg_attr(feature = "serde", serde(rename = "r"))]
    pub min_distance: f64,
    pub dims: [usize; 3],
    pub k_attempts: usize,
    pub coords: Vec<[usize; 3]>,
}

impl SamplingKey {
    /// Feature dimension `D`.
    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Stable 64-bit FNV-1a fingerprint of the key, as 16 hex digits.
    pub fn key_id(&self) -> String {
        let mut h = Fnv::new();
        h.write(&self.seed.to_le_bytes());
        h.write(&self.min_distance.to_bits().to_le_bytes());
        for d in self.dims {
            h.write(&(d as u64).to_le_bytes());
        }
        h.write(&(self.k_attempts as u64).to_le_bytes());
        for c in &self.coords {
            for v in c {
                h.write(&(*v as u64).to_le_bytes());
            }
        }
        format!("{:016x}", h.0)
    }

    /// Checks that every coordinate lies inside `dims`.
    pub fn validate(&self) -> Result<()> {
        if self.coords.is_empty() {
            return Err(Error::InvalidArgument("sampling key has no coordinates".into()));
        }
        for c in &self.coords {
            if c.iter().zip(self.dims).any(|(&v, n)| v >= n) {
                return Err(Error::ShapeMismatch(format!(
                    "coordinate {c:?} outside volume {:?}",
                    self.dims
                )));
            }
        }
        Ok(())
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// Sampled activations of one input, ordered by the key.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    pub input_id: String,
    pub key_id: String,
}

impl FeatureVector {
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Background grid with one slot per cell of side `r / sqrt(3)`; a cell
/// can hold at most one point of a set with minimum distance `r`.
struct Grid {
    cell: f64,
    size: [usize; 3],
    slots: Vec<usize>,
}

impl Grid {
    const EMPTY: usize = usize::MAX;

    fn new(extent: [f64; 3], r: f64) -> Self {
        let cell = r / libm::sqrt(3.0);
        let size = extent.map(|e| (libm::ceil(e / cell) as usize).max(1));
        Self {
            cell,
            size,
            slots: vec![Self::EMPTY; size[0] * size[1] * size[2]],
        }
    }

    fn cell_of(&self, p: &[f64; 3]) -> [usize; 3] {
        let mut c = [0; 3];
        for i in 0..3 {
            c[i] = ((p[i] / self.cell) as usize).min(self.size[i] - 1);
        }
        c
    }

    fn index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.size[1] + c[1]) * self.size[2] + c[2]
    }

    /// True if no stored point lies strictly closer than `r` to `p`.
    fn is_free(&self, p: &[f64; 3], r: f64, points: &[[f64; 3]]) -> bool {
        let c = self.cell_of(p);
        let r2 = r * r;
        let lo = c.map(|v| v.saturating_sub(2));
        let hi = [
            (c[0] + 2).min(self.size[0] - 1),
            (c[1] + 2).min(self.size[1] - 1),
            (c[2] + 2).min(self.size[2] - 1),
        ];
        for a in lo[0]..=hi[0] {
            for b in lo[1]..=hi[1] {
                for d in lo[2]..=hi[2] {
                    let slot = self.slots[self.index([a, b, d])];
                    if slot != Self::EMPTY && dist2(&points[slot], p) < r2 {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn insert(&mut self, p: &[f64; 3], id: usize) {
        let idx = self.index(self.cell_of(p));
        self.slots[idx] = id;
    }
}

/// Draws a blue-noise sampling key with Bridson's algorithm.
///
/// Distances are measured in voxel units, identical on all three axes, over
/// the box `[0,H) x [0,W) x [0,L)`. The first point is uniform, the active
/// point is picked uniformly and candidates are uniform in the spherical
/// shell `[r, 2r]` around it. Each candidate is snapped to the nearest
/// voxel before the distance test, so every accepted coordinate is an
/// integer voxel at distance `>= r` from all others. Candidates that leave
/// the box are redrawn and do not count toward `k_attempts`; in slabs
/// thinner than `r` most of the shell lies outside the box.
pub fn bridson_sample(dims: [usize; 3], r: f64, seed: u64, k_attempts: usize) -> Result<SamplingKey> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidArgument(format!("minimum distance must be positive, got {r}")));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("volume dims must be positive, got {dims:?}")));
    }
    let k_attempts = k_attempts.max(1);
    let extent = dims.map(|d| d as f64);
    let mut rng = SeededRng::new(seed);
    let mut grid = Grid::new(extent, r);
    let mut points: Vec<[f64; 3]> = Vec::new();
    let mut active: Vec<usize> = Vec::new();

    let snap = |p: [f64; 3]| -> [f64; 3] {
        let mut q = [0.0; 3];
        for i in 0..3 {
            q[i] = libm::round(p[i]).clamp(0.0, extent[i] - 1.0);
        }
        q
    };
    let first = snap([
        rng.uniform() * extent[0],
        rng.uniform() * extent[1],
        rng.uniform() * extent[2],
    ]);
    grid.insert(&first, 0);
    points.push(first);
    active.push(0);

    let shell = 8.0 * r * r * r - r * r * r;
    while !active.is_empty() {
        let slot = rng.below(active.len());
        let centre = points[active[slot]];
        let mut placed = false;
        let mut tried = 0;
        for _ in 0..k_attempts * MAX_DRAWS_PER_ATTEMPT {
            if tried == k_attempts {
                break;
            }
            let radius = libm::cbrt(r * r * r + rng.uniform() * shell);
            let cos_t = 2.0 * rng.uniform() - 1.0;
            let sin_t = libm::sqrt((1.0 - cos_t * cos_t).max(0.0));
            let phi = core::f64::consts::TAU * rng.uniform();
            let cand = [
                centre[0] + radius * cos_t,
                centre[1] + radius * sin_t * libm::cos(phi),
                centre[2] + radius * sin_t * libm::sin(phi),
            ];
            if (0..3).any(|i| cand[i] < 0.0 || cand[i] >= extent[i]) {
                continue;
            }
            tried += 1;
            let cand = snap(cand);
            if grid.is_free(&cand, r, &points) {
                let id = points.len();
                grid.insert(&cand, id);
                points.push(cand);
                active.push(id);
                placed = true;
                break;
            }
        }
        if !placed {
            active.swap_remove(slot);
        }
    }

    Ok(SamplingKey {
        seed,
        min_distance: r,
        dims,
        k_attempts,
        coords: points
            .iter()
            .map(|q| q.map(|v| v as usize))
            .collect(),
    })
}

/// Looks up the key's voxels in `volume`.
pub fn extract_features(volume: &NumArray, key: &SamplingKey) -> Result<Vec<f32>> {
    if volume.shape() != key.dims {
        return Err(Error::ShapeMismatch(format!(
            "volume {:?} does not match key dims {:?}",
            volume.shape(),
            key.dims
        )));
    }
    let [_, w, l] = key.dims;
    let data = volume.data();
    Ok(key
        .coords
        .iter()
        .map(|[a, b, c]| data[(a * w + b) * l + c])
        .collect())
}

/// Equivalent to `extract_features(assemble_volume(..))` without
/// materializing the volume.
pub fn extract_from_record(
    record: &ActivationRecord,
    key: &SamplingKey,
    selection: LayerSelection,
) -> Result<Vec<f32>> {
    let [th, tw, depth] = key.dims;
    // depth index -> (layer, channel)
    let mut maps = Vec::with_capacity(depth);
    for layer in record.layers.iter().filter(|l| selection.matches(&l.name)) {
        if layer.height > th || layer.width > tw {
            return Err(Error::DownsamplingUnsupported {
                src: (layer.height, layer.width),
                target: (th, tw),
            });
        }
        for c in 0..layer.channels {
            maps.push((layer, c));
        }
    }
    if maps.is_empty() {
        return Err(Error::EmptySelection);
    }
    if maps.len() != depth {
        return Err(Error::SchemaMismatch(format!(
            "record {} selects {} channel maps, key expects {depth}",
            record.input_id,
            maps.len()
        )));
    }
    Ok(key
        .coords
        .iter()
        .map(|&[i, j, l]| {
            let (layer, c) = maps[l];
            let (h, w) = (layer.height, layer.width);
            layer.channel(c)[(i * h / th) * w + j * w / tw]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Layer;

    fn arr(shape: &[usize], data: &[f32]) -> NumArray {
        NumArray::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn upsample_row() {
        let up = upsample_nn(&arr(&[1, 2], &[1.0, 2.0]), (1, 4)).unwrap();
        assert_eq!(up.data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn upsample_block_replication() {
        let up = upsample_nn(&arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), (4, 4)).unwrap();
        assert_eq!(
            up.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn upsample_identity_and_downsample_error() {
        let m = arr(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(upsample_nn(&m, (2, 3)).unwrap(), m);
        assert!(matches!(
            upsample_nn(&m, (1, 3)),
            Err(Error::DownsamplingUnsupported { .. })
        ));
    }

    fn record(layers: Vec<Layer>) -> ActivationRecord {
        ActivationRecord {
            input_id: "x".into(),
            perturbation: "none".into(),
            layers,
        }
    }

    #[test]
    fn volume_stacks_channels() {
        let r = record(vec![Layer::new("a.conv", 2, 1, 2, vec![1., 2., 3., 4.]).unwrap()]);
        let v = assemble_volume(&r, (1, 2), LayerSelection::Everywhere).unwrap();
        assert_eq!(v.shape(), &[1, 2, 2]);
        assert_eq!(v.get(&[0, 0, 0]), 1.0);
        assert_eq!(v.get(&[0, 1, 0]), 2.0);
        assert_eq!(v.get(&[0, 0, 1]), 3.0);
        assert_eq!(v.get(&[0, 1, 1]), 4.0);
    }

    #[test]
    fn volume_depth_counts_channels() {
        let r = record(vec![
            Layer::new("a", 2, 1, 1, vec![0.; 2]).unwrap(),
            Layer::new("b", 1, 1, 1, vec![0.; 1]).unwrap(),
            Layer::new("c", 4, 1, 1, vec![0.; 4]).unwrap(),
        ]);
        let v = assemble_volume(&r, (2, 2), LayerSelection::Everywhere).unwrap();
        assert_eq!(v.shape(), &[2, 2, 7]);
        assert!(matches!(
            assemble_volume(&r, (2, 2), LayerSelection::ConvOutputs),
            Err(Error::EmptySelection)
        ));
    }

    #[test]
    fn tiny_volume_gets_one_sample() {
        let key = bridson_sample([4, 4, 4], 10.0, 1, DEFAULT_K_ATTEMPTS).unwrap();
        assert_eq!(key.dim(), 1);
    }

    #[test]
    fn sampler_is_deterministic() {
        let a = bridson_sample([16, 16, 4], 2.0, 9, 30).unwrap();
        let b = bridson_sample([16, 16, 4], 2.0, 9, 30).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.key_id(), b.key_id());
        let c = bridson_sample([16, 16, 4], 2.0, 10, 30).unwrap();
        assert_ne!(a.key_id(), c.key_id());
    }

    #[test]
    fn min_distance_holds_for_all_pairs() {
        let key = bridson_sample([20, 24, 6], 3.0, 5, 30).unwrap();
        key.validate().unwrap();
        for (i, a) in key.coords.iter().enumerate() {
            for b in &key.coords[i + 1..] {
                let d2: f64 = (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum();
                assert!(d2 >= 9.0, "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn constant_volume_gives_constant_features() {
        let key = bridson_sample([6, 6, 3], 2.0, 1, 30).unwrap();
        let v = NumArray::from_fn(vec![6, 6, 3], |_| 1.0);
        assert!(extract_features(&v, &key).unwrap().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn single_lookup_and_locality() {
        let key = SamplingKey {
            seed: 0,
            min_distance: 1.0,
            dims: [2, 2, 2],
            k_attempts: 30,
            coords: vec![[0, 0, 0]],
        };
        let mut v = NumArray::zeros(vec![2, 2, 2]);
        v.data_mut()[0] = 5.0;
        assert_eq!(extract_features(&v, &key).unwrap(), vec![5.0]);
        let mut w = v.clone();
        w.data_mut()[7] = -3.0;
        assert_eq!(extract_features(&w, &key).unwrap(), vec![5.0]);
        assert!(extract_features(&NumArray::zeros(vec![2, 2, 3]), &key).is_err());
    }

    #[test]
    fn record_lookup_matches_volume() {
        let mut rng = SeededRng::new(4);
        let mut vals = |n: usize| (0..n).map(|_| rng.uniform_f32()).collect::<Vec<_>>();
        let r = record(vec![
            Layer::new("s1.conv", 2, 8, 6, vals(96)).unwrap(),
            Layer::new("s2.pre_bn", 3, 4, 3, vals(36)).unwrap(),
            Layer::new("s3.conv", 1, 2, 2, vals(4)).unwrap(),
        ]);
        for sel in [LayerSelection::Everywhere, LayerSelection::ConvOutputs] {
            let vol = assemble_volume(&r, (8, 12), sel).unwrap();
            let dims = [8, 12, vol.shape()[2]];
            let key = bridson_sample(dims, 1.5, 3, 30).unwrap();
            assert_eq!(
                extract_features(&vol, &key).unwrap(),
                extract_from_record(&r, &key, sel).unwrap()
            );
        }
    }
}
