//! Crystal structures: lattices, fractional/Cartesian coordinates, rigid
//! motions, space-group style symmetry operations, and symmetry orbits.
//!
//! All types are immutable values and every operation is a pure function.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::{self, Mat3, Vec3};
use crate::tape::quat_rotation_entries;

/// |det L| below this is treated as a singular lattice (cubic angstroms).
pub const LATTICE_DET_TOL: f64 = 1e-8;

/// Fractional coordinates this close to 1.0 wrap to exactly 0.0, keeping
/// orbit comparisons stable across round-trips.
pub const WRAP_GUARD: f64 = 1e-12;

/// Default tolerance for orbit matching, in minimum-image fractional
/// distance.
pub const ORBIT_TOL: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrystalError {
    #[error("lattice is singular: |det| = {det:.3e} <= {tol:.1e}")]
    SingularLattice { det: f64, tol: f64 },
    #[error("structure must contain at least one atom")]
    EmptyStructure,
    #[error("species ({species}) and fractional coordinates ({coords}) differ in length")]
    LengthMismatch { species: usize, coords: usize },
    #[error("rotation fails orthogonality/determinant check (defect {defect:.3e})")]
    InvalidRotation { defect: f64 },
    #[error("symmetry op has non-unimodular integer part (det = {det})")]
    NonUnimodularOp { det: i64 },
    #[error(
        "symmetry op is incompatible with the lattice: Cartesian form has \
         orthogonality defect {defect:.3e} (tolerance {tol:.1e})"
    )]
    OpLatticeMismatch { defect: f64, tol: f64 },
    #[error(
        "symmetry violation: op {op} maps atom {atom} (Z={src_species}) onto \
         atom {target} of species Z={dst_species}"
    )]
    SpeciesMismatch {
        op: usize,
        atom: usize,
        src_species: u32,
        target: usize,
        dst_species: u32,
    },
    #[error(
        "symmetry violation: op {op} maps atom {atom} onto empty space \
         (nearest atom at fractional distance {nearest:.3e}, tolerance {tol:.1e})"
    )]
    UnmatchedImage {
        op: usize,
        atom: usize,
        nearest: f64,
        tol: f64,
    },
    #[error("orbit tolerance must be positive, got {0}")]
    BadTolerance(f64),
}

/// Wraps a fractional coordinate into [0, 1) with a guard that snaps values
/// within [`WRAP_GUARD`] of 1.0 down to 0.0.
pub fn wrap_frac(v: f64) -> f64 {
    let mut w = v - v.floor();
    if w >= 1.0 {
        w -= 1.0;
    }
    if 1.0 - w < WRAP_GUARD {
        w = 0.0;
    }
    w
}

fn wrap_frac3(f: Vec3) -> Vec3 {
    [wrap_frac(f[0]), wrap_frac(f[1]), wrap_frac(f[2])]
}

/// Componentwise difference wrapped to the nearest image, each component in
/// [-0.5, 0.5].
pub fn min_image_frac_delta(a: Vec3, b: Vec3) -> Vec3 {
    let mut d = linalg::sub(a, b);
    for v in d.iter_mut() {
        *v -= v.round();
    }
    d
}

fn min_image_frac_dist(a: Vec3, b: Vec3) -> f64 {
    let d = min_image_frac_delta(a, b);
    d[0].abs().max(d[1].abs()).max(d[2].abs())
}

/// Unit cell: three lattice vectors stored as the columns of a 3x3 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    matrix: Mat3,
    inverse: Mat3,
}

impl Lattice {
    /// Builds a lattice from its three column vectors.
    pub fn from_columns(l1: Vec3, l2: Vec3, l3: Vec3) -> Result<Self, CrystalError> {
        Self::from_matrix(linalg::from_columns(l1, l2, l3))
    }

    /// Builds a lattice from a matrix whose columns are the lattice vectors.
    pub fn from_matrix(matrix: Mat3) -> Result<Self, CrystalError> {
        let det = linalg::det(&matrix);
        let inverse = linalg::inverse(&matrix, LATTICE_DET_TOL).ok_or(
            CrystalError::SingularLattice {
                det,
                tol: LATTICE_DET_TOL,
            },
        )?;
        Ok(Lattice { matrix, inverse })
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.matrix
    }

    pub fn inverse_matrix(&self) -> &Mat3 {
        &self.inverse
    }

    pub fn column(&self, j: usize) -> Vec3 {
        linalg::column(&self.matrix, j)
    }

    pub fn det(&self) -> f64 {
        linalg::det(&self.matrix)
    }

    /// Interplanar spacing along axis `m`: the distance between the lattice
    /// planes spanned by the other two lattice vectors. Equal to
    /// 1 / ||row m of L^-1||.
    pub fn plane_spacing(&self, m: usize) -> f64 {
        let row = self.inverse[m];
        1.0 / linalg::norm(row)
    }
}

/// Converts fractional to Cartesian coordinates: x = sum_j f_j l_j.
pub fn frac_to_cart(f: Vec3, lattice: &Lattice) -> Vec3 {
    linalg::mat_vec(lattice.matrix(), f)
}

/// Converts Cartesian to fractional coordinates: f = L^-1 x.
pub fn cart_to_frac(x: Vec3, lattice: &Lattice) -> Vec3 {
    linalg::mat_vec(lattice.inverse_matrix(), x)
}

/// A crystal structure: atomic numbers plus fractional coordinates in a
/// lattice. Coordinates are wrapped into [0, 1) on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    species: Vec<u32>,
    frac: Vec<Vec3>,
    lattice: Lattice,
}

impl Structure {
    pub fn new(species: Vec<u32>, frac: Vec<Vec3>, lattice: Lattice) -> Result<Self, CrystalError> {
        if species.is_empty() {
            return Err(CrystalError::EmptyStructure);
        }
        if species.len() != frac.len() {
            return Err(CrystalError::LengthMismatch {
                species: species.len(),
                coords: frac.len(),
            });
        }
        let frac = frac.into_iter().map(wrap_frac3).collect();
        Ok(Structure {
            species,
            frac,
            lattice,
        })
    }

    pub fn len(&self) -> usize {
        self.species.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one atom
    }

    pub fn species(&self) -> &[u32] {
        &self.species
    }

    pub fn frac(&self) -> &[Vec3] {
        &self.frac
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn position(&self, i: usize) -> Vec3 {
        frac_to_cart(self.frac[i], &self.lattice)
    }

    pub fn positions(&self) -> Vec<Vec3> {
        (0..self.len()).map(|i| self.position(i)).collect()
    }

    /// Shortest distance between atoms i and j over the 27 nearest images.
    pub fn min_image_distance(&self, i: usize, j: usize) -> f64 {
        let xi = self.position(i);
        let xj = self.position(j);
        let mut best = f64::INFINITY;
        for k0 in -1..=1 {
            for k1 in -1..=1 {
                for k2 in -1..=1 {
                    let shift = frac_to_cart([k0 as f64, k1 as f64, k2 as f64], &self.lattice);
                    let d = linalg::norm(linalg::sub(linalg::add(xj, shift), xi));
                    best = best.min(d);
                }
            }
        }
        best
    }
}

/// A rotation-plus-translation acting on Cartesian space.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidMotion {
    rotation: Mat3,
    translation: Vec3,
}

impl RigidMotion {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, CrystalError> {
        let defect = linalg::orthogonality_defect(&rotation)
            .max((linalg::det(&rotation) - 1.0).abs());
        if defect >= 1e-12 {
            return Err(CrystalError::InvalidRotation { defect });
        }
        Ok(RigidMotion {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        RigidMotion {
            rotation: linalg::IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }
}

/// Applies a rigid motion: lattice columns become Q l_j, Cartesian positions
/// become Q x + t, and fractional coordinates are recomputed and wrapped.
pub fn apply_rigid_motion(s: &Structure, g: &RigidMotion) -> Result<Structure, CrystalError> {
    let rotated = linalg::mat_mul(g.rotation(), s.lattice().matrix());
    let lattice = Lattice::from_matrix(rotated)?;
    let frac: Vec<Vec3> = (0..s.len())
        .map(|i| {
            let x = linalg::add(linalg::mat_vec(g.rotation(), s.position(i)), g.translation());
            wrap_frac3(cart_to_frac(x, &lattice))
        })
        .collect();
    Structure::new(s.species().to_vec(), frac, lattice)
}

/// A symmetry operation in fractional coordinates: an integer rotation part
/// and a fractional translation.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryOp {
    w_rot: [[i64; 3]; 3],
    w_trans: Vec3,
}

impl SymmetryOp {
    pub fn new(w_rot: [[i64; 3]; 3], w_trans: Vec3) -> Result<Self, CrystalError> {
        let m = Self::rot_as_f64(&w_rot);
        let det = linalg::det(&m).round() as i64;
        if det.abs() != 1 {
            return Err(CrystalError::NonUnimodularOp { det });
        }
        Ok(SymmetryOp { w_rot, w_trans })
    }

    pub fn identity() -> Self {
        SymmetryOp {
            w_rot: [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
            w_trans: [0.0; 3],
        }
    }

    fn rot_as_f64(w: &[[i64; 3]; 3]) -> Mat3 {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = w[i][j] as f64;
            }
        }
        m
    }

    pub fn w_rot(&self) -> &[[i64; 3]; 3] {
        &self.w_rot
    }

    pub fn w_trans(&self) -> Vec3 {
        self.w_trans
    }

    /// The operation's Cartesian rotation Q = L W L^-1.
    pub fn cartesian_rotation(&self, lattice: &Lattice) -> Mat3 {
        let w = Self::rot_as_f64(&self.w_rot);
        linalg::mat_mul(
            &linalg::mat_mul(lattice.matrix(), &w),
            lattice.inverse_matrix(),
        )
    }

    /// Checks that the Cartesian form is orthogonal for the given lattice.
    pub fn validate_for(&self, lattice: &Lattice) -> Result<(), CrystalError> {
        let q = self.cartesian_rotation(lattice);
        let defect = linalg::orthogonality_defect(&q);
        if defect >= 1e-8 {
            return Err(CrystalError::OpLatticeMismatch { defect, tol: 1e-8 });
        }
        Ok(())
    }

    /// Maps a fractional coordinate: wrap(W f + w_trans).
    pub fn apply_frac(&self, f: Vec3) -> Vec3 {
        let m = Self::rot_as_f64(&self.w_rot);
        wrap_frac3(linalg::add(linalg::mat_vec(&m, f), self.w_trans))
    }
}

/// Applies a symmetry operation to every atom; the lattice is unchanged.
pub fn apply_symmetry_op(s: &Structure, op: &SymmetryOp) -> Result<Structure, CrystalError> {
    op.validate_for(s.lattice())?;
    let frac: Vec<Vec3> = s.frac().iter().map(|&f| op.apply_frac(f)).collect();
    Structure::new(s.species().to_vec(), frac, s.lattice().clone())
}

/// Partitions atom indices into orbits under the given operations: atoms i
/// and j share an orbit iff some op maps f_i onto f_j (minimum-image
/// fractional distance below `tol`) with matching species. The partition is
/// the equivalence closure of all certified pairs. Ops that fail to map an
/// atom onto a same-species atom are reported as symmetry violations.
pub fn orbits(
    s: &Structure,
    ops: &[SymmetryOp],
    tol: f64,
) -> Result<Vec<Vec<usize>>, CrystalError> {
    if tol <= 0.0 {
        return Err(CrystalError::BadTolerance(tol));
    }
    let n = s.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for (op_idx, op) in ops.iter().enumerate() {
        op.validate_for(s.lattice())?;
        for i in 0..n {
            let image = op.apply_frac(s.frac()[i]);
            let (mut best_j, mut best_d) = (0usize, f64::INFINITY);
            for j in 0..n {
                let d = min_image_frac_dist(image, s.frac()[j]);
                if d < best_d {
                    best_d = d;
                    best_j = j;
                }
            }
            if best_d >= tol {
                return Err(CrystalError::UnmatchedImage {
                    op: op_idx,
                    atom: i,
                    nearest: best_d,
                    tol,
                });
            }
            if s.species()[best_j] != s.species()[i] {
                return Err(CrystalError::SpeciesMismatch {
                    op: op_idx,
                    atom: i,
                    src_species: s.species()[i],
                    target: best_j,
                    dst_species: s.species()[best_j],
                });
            }
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, best_j));
            if ri != rj {
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = find(&mut parent, i);
        groups[r].push(i);
    }
    Ok(groups.into_iter().filter(|g| !g.is_empty()).collect())
}

/// Rotation matrix uniformly distributed over SO(3), built by normalizing
/// four standard normals into a quaternion. Deterministic per seed.
pub fn random_rotation(seed: u64) -> RigidMotion {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-9 {
            continue;
        }
        let e = quat_rotation_entries(q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
        let rotation = [
            [e[0], e[1], e[2]],
            [e[3], e[4], e[5]],
            [e[6], e[7], e[8]],
        ];
        return RigidMotion {
            rotation,
            translation: [0.0; 3],
        };
    }
}

/// Random rotation plus a translation drawn uniformly from [-5, 5]^3 Å.
pub fn random_rigid_motion(seed: u64) -> RigidMotion {
    let rotation = *random_rotation(seed).rotation();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let translation = [
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
    ];
    RigidMotion {
        rotation,
        translation,
    }
}
