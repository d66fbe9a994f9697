//! Directional sequential thinning to a one-voxel-wide curve skeleton.
//!
//! A voxel is removed when it is a border voxel for the current direction,
//! is not a curve endpoint, and is simple: its 26-neighbourhood foreground
//! forms one 26-component and its 18-neighbourhood background has exactly
//! one 6-component touching a face neighbour.

use std::sync::OnceLock;

use crate::volume::{LabelVolume, Voxel};

/// Binary voxel mask with the same dims as its source volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    dims: [usize; 3],
    mask: Vec<bool>,
}

impl Skeleton {
    pub fn from_voxels(dims: [usize; 3], voxels: &[Voxel]) -> Self {
        let mut mask = vec![false; dims.iter().product()];
        for v in voxels {
            mask[v[0] + dims[0] * (v[1] + dims[1] * v[2])] = true;
        }
        Self { dims, mask }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn contains(&self, v: [i64; 3]) -> bool {
        (0..3).all(|a| v[a] >= 0 && (v[a] as usize) < self.dims[a])
            && self.mask[v[0] as usize + self.dims[0] * (v[1] as usize + self.dims[1] * v[2] as usize)]
    }

    /// Skeleton voxels in z-major, y, x order.
    pub fn voxels(&self) -> Vec<Voxel> {
        let [dx, dy, _] = self.dims;
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| [i % dx, (i / dx) % dy, i / (dx * dy)]).collect()
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Offsets of the 26 neighbours in scan order (z, then y, then x).
pub(crate) fn neighbor_offsets() -> &'static [[i64; 3]; 26] {
    static OFFS: OnceLock<[[i64; 3]; 26]> = OnceLock::new();
    OFFS.get_or_init(|| {
        let mut out = [[0; 3]; 26];
        let mut n = 0;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if (dx, dy, dz) != (0, 0, 0) {
                        out[n] = [dx, dy, dz];
                        n += 1;
                    }
                }
            }
        }
        out
    })
}

// Cube cells are indexed 0..27 as (dx+1) + 3(dy+1) + 9(dz+1); 13 is the centre.
struct CubeTables {
    adj26: Vec<Vec<usize>>,
    adj6: Vec<Vec<usize>>,
    n18: [bool; 27],
    face: [bool; 27],
}

fn cube_tables() -> &'static CubeTables {
    static T: OnceLock<CubeTables> = OnceLock::new();
    T.get_or_init(|| {
        let coord = |i: usize| [(i % 3) as i64 - 1, ((i / 3) % 3) as i64 - 1, (i / 9) as i64 - 1];
        let mut adj26 = vec![Vec::new(); 27];
        let mut adj6 = vec![Vec::new(); 27];
        let mut n18 = [false; 27];
        let mut face = [false; 27];
        for i in 0..27 {
            let a = coord(i);
            let nz = a.iter().filter(|&&c| c != 0).count();
            n18[i] = (1..=2).contains(&nz);
            face[i] = nz == 1;
            for j in 0..27 {
                if i == j || i == 13 || j == 13 {
                    continue;
                }
                let b = coord(j);
                let d: Vec<i64> = (0..3).map(|k| (a[k] - b[k]).abs()).collect();
                if d.iter().all(|&x| x <= 1) {
                    adj26[i].push(j);
                    if d.iter().sum::<i64>() == 1 {
                        adj6[i].push(j);
                    }
                }
            }
        }
        CubeTables { adj26, adj6, n18, face }
    })
}

/// Simple-point test on a 3×3×3 neighbourhood (`cube[13]` is the centre).
pub fn is_simple(cube: &[bool; 27]) -> bool {
    let t = cube_tables();
    // Foreground: exactly one 26-component among the 26 neighbours.
    let mut seen = [false; 27];
    let mut components = 0;
    let mut stack = Vec::with_capacity(27);
    for s in 0..27 {
        if s == 13 || !cube[s] || seen[s] {
            continue;
        }
        components += 1;
        if components > 1 {
            return false;
        }
        seen[s] = true;
        stack.push(s);
        while let Some(c) = stack.pop() {
            for &n in &t.adj26[c] {
                if cube[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
    }
    if components != 1 {
        return false;
    }
    // Background: exactly one 6-component in N18 that touches a face neighbour.
    let mut seen = [false; 27];
    let mut touching = 0;
    for s in 0..27 {
        if !t.face[s] || cube[s] || seen[s] {
            continue;
        }
        touching += 1;
        if touching > 1 {
            return false;
        }
        seen[s] = true;
        stack.push(s);
        while let Some(c) = stack.pop() {
            for &n in &t.adj6[c] {
                if t.n18[n] && !cube[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
    }
    touching == 1
}

struct Padded {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl Padded {
    fn from_volume(vol: &LabelVolume) -> Self {
        let [dx, dy, dz] = vol.dims();
        let dims = [dx + 2, dy + 2, dz + 2];
        let mut data = vec![false; dims.iter().product()];
        for (i, &l) in vol.data().iter().enumerate() {
            if l != 0 {
                let v = vol.voxel_of(i);
                data[(v[0] + 1) + dims[0] * ((v[1] + 1) + dims[1] * (v[2] + 1))] = true;
            }
        }
        Self { dims, data }
    }

    #[inline]
    fn stride(&self) -> [isize; 3] {
        [1, self.dims[0] as isize, (self.dims[0] * self.dims[1]) as isize]
    }

    #[inline]
    fn cube(&self, i: usize) -> [bool; 27] {
        let s = self.stride();
        let mut c = [false; 27];
        let mut n = 0;
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    c[n] = self.data[(i as isize + dx * s[0] + dy * s[1] + dz * s[2]) as usize];
                    n += 1;
                }
            }
        }
        c
    }
}

fn neighbor_count(cube: &[bool; 27]) -> usize {
    cube.iter().enumerate().filter(|&(i, &b)| i != 13 && b).count()
}

/// Thins the foreground of `vol` (any nonzero label) to a curve skeleton.
///
/// Runs the six directional sub-cycles until a full pass deletes nothing.
/// Within a sub-cycle the candidates are re-checked one at a time in scan
/// order, so the result is deterministic.
pub fn thin(vol: &LabelVolume) -> Skeleton {
    let mut img = Padded::from_volume(vol);
    let s = img.stride();
    // Face neighbour offsets: -x, +x, -y, +y, -z, +z.
    let directions = [-s[0], s[0], -s[1], s[1], -s[2], s[2]];
    let mut fg: Vec<usize> = (0..img.data.len()).filter(|&i| img.data[i]).collect();
    loop {
        let mut changed = false;
        for &dir in &directions {
            let candidates: Vec<usize> = fg
                .iter()
                .copied()
                .filter(|&i| {
                    if img.data[(i as isize + dir) as usize] {
                        return false;
                    }
                    let cube = img.cube(i);
                    neighbor_count(&cube) > 1 && is_simple(&cube)
                })
                .collect();
            for i in candidates {
                let cube = img.cube(i);
                if neighbor_count(&cube) > 1 && is_simple(&cube) {
                    img.data[i] = false;
                    changed = true;
                }
            }
            fg.retain(|&i| img.data[i]);
        }
        if !changed {
            break;
        }
    }
    let [dx, dy, dz] = vol.dims();
    let mut mask = vec![false; dx * dy * dz];
    for i in fg {
        let x = i % img.dims[0] - 1;
        let y = (i / img.dims[0]) % img.dims[1] - 1;
        let z = i / (img.dims[0] * img.dims[1]) - 1;
        mask[x + dx * (y + dy * z)] = true;
    }
    Skeleton { dims: [dx, dy, dz], mask }
}

/// Whether `v` could still be removed by [`thin`]: not an endpoint, and simple.
pub fn is_deletable(skel: &Skeleton, v: Voxel) -> bool {
    let mut cube = [false; 27];
    let mut n = 0;
    for dz in -1..=1i64 {
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                cube[n] = skel.contains([v[0] as i64 + dx, v[1] as i64 + dy, v[2] as i64 + dz]);
                n += 1;
            }
        }
    }
    neighbor_count(&cube) > 1 && is_simple(&cube)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_volume(len: usize) -> LabelVolume {
        let mut v = LabelVolume::zeros([len + 2, 3, 3], [1.0; 3], 1);
        for x in 1..=len {
            v.set([x, 1, 1], 1);
        }
        v
    }

    #[test]
    fn interior_of_a_line_is_not_simple() {
        let mut cube = [false; 27];
        cube[12] = true;
        cube[13] = true;
        cube[14] = true;
        assert!(!is_simple(&cube));
    }

    #[test]
    fn tip_of_a_line_is_simple() {
        let mut cube = [false; 27];
        cube[13] = true;
        cube[14] = true;
        assert!(is_simple(&cube));
    }

    #[test]
    fn fully_interior_voxel_is_not_simple() {
        assert!(!is_simple(&[true; 27]));
    }

    #[test]
    fn straight_segment_is_fixed_point() {
        let v = line_volume(10);
        let skel = thin(&v);
        let want: Vec<_> = (1..=10).map(|x| [x, 1, 1]).collect();
        assert_eq!(skel.voxels(), want);
        // Oracle: every interior voxel has two neighbours and removing it
        // disconnects the line; the two ends are endpoints.
        for x in 1..=10usize {
            let n = [x as i64 - 1, x as i64 + 1].iter().filter(|&&nx| skel.contains([nx, 1, 1])).count();
            assert!(n == 2 || (n == 1 && (x == 1 || x == 10)));
        }
    }

    #[test]
    fn single_voxel_survives() {
        let mut v = LabelVolume::zeros([3, 3, 3], [1.0; 3], 1);
        v.set([1, 1, 1], 1);
        assert_eq!(thin(&v).voxels(), vec![[1, 1, 1]]);
    }

    #[test]
    fn empty_input_gives_empty_skeleton() {
        let v = LabelVolume::zeros([4, 4, 4], [1.0; 3], 1);
        assert!(thin(&v).is_empty());
    }

    #[test]
    fn solid_box_thins_to_thin_connected_subset() {
        let mut v = LabelVolume::zeros([12, 8, 8], [1.0; 3], 1);
        for z in 2..6 {
            for y in 2..6 {
                for x in 1..11 {
                    v.set([x, y, z], 1);
                }
            }
        }
        let skel = thin(&v);
        assert!(!skel.is_empty());
        assert!(skel.len() < 20);
        for p in skel.voxels() {
            assert_eq!(v.get(p), 1);
            assert!(!is_deletable(&skel, p));
        }
    }
}
