//! Cell-centered two-point flux discretization of `-div(k grad u) = f`.
//!
//! Interior faces use the harmonic mean of the adjacent cell conductivities;
//! Dirichlet faces are eliminated through the half-cell distance to the face.

use crate::grid::UniformGrid;
use crate::linalg::StencilMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum FaceBc {
    Dirichlet(f64),
    NoFlow,
}

/// Boundary data callback: `(axis, side, face_center)` with side 0 = low, 1 = high.
pub(crate) type BcFn<'a> = &'a dyn Fn(usize, usize, [f64; 2]) -> FaceBc;

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Transmissibilities and dual-cell widths of every face.
///
/// x-faces are indexed `i + (nx + 1) * j` for `i in 0..=nx`;
/// y-faces are indexed `i + nx * j` for `j in 0..=ny` (2D only).
pub(crate) struct FaceGeometry {
    pub tx: Vec<f64>,
    pub ty: Vec<f64>,
    pub wx: Vec<f64>,
    pub wy: Vec<f64>,
}

pub(crate) fn face_geometry(grid: &UniformGrid, kx: &[f64], ky: &[f64]) -> FaceGeometry {
    let (nx, ny, h) = (grid.nx(), grid.ny(), grid.h());
    let area = h.powi(grid.dim() as i32 - 1);
    let mut tx = vec![0.0; (nx + 1) * ny];
    let mut wx = vec![0.0; (nx + 1) * ny];
    for j in 0..ny {
        for i in 0..=nx {
            let f = i + (nx + 1) * j;
            if i == 0 {
                tx[f] = kx[grid.index(0, j)] * area / (0.5 * h);
                wx[f] = 0.5 * h;
            } else if i == nx {
                tx[f] = kx[grid.index(nx - 1, j)] * area / (0.5 * h);
                wx[f] = 0.5 * h;
            } else {
                tx[f] = harmonic(kx[grid.index(i - 1, j)], kx[grid.index(i, j)]) * area / h;
                wx[f] = h;
            }
        }
    }
    let (mut ty, mut wy) = (Vec::new(), Vec::new());
    if grid.dim() == 2 {
        ty = vec![0.0; nx * (ny + 1)];
        wy = vec![0.0; nx * (ny + 1)];
        for j in 0..=ny {
            for i in 0..nx {
                let f = i + nx * j;
                if j == 0 {
                    ty[f] = ky[grid.index(i, 0)] * area / (0.5 * h);
                    wy[f] = 0.5 * h;
                } else if j == ny {
                    ty[f] = ky[grid.index(i, ny - 1)] * area / (0.5 * h);
                    wy[f] = 0.5 * h;
                } else {
                    ty[f] = harmonic(ky[grid.index(i, j - 1)], ky[grid.index(i, j)]) * area / h;
                    wy[f] = h;
                }
            }
        }
    }
    FaceGeometry { tx, ty, wx, wy }
}

fn x_face_center(grid: &UniformGrid, i: usize, j: usize) -> [f64; 2] {
    let c = grid.center(0, j);
    [grid.origin()[0] + i as f64 * grid.h(), c[1]]
}

fn y_face_center(grid: &UniformGrid, i: usize, j: usize) -> [f64; 2] {
    let c = grid.center(i, 0);
    [c[0], grid.origin()[1] + j as f64 * grid.h()]
}

/// Assembles the symmetric system; `source` holds cell-integrated right-hand sides.
pub(crate) fn assemble(
    grid: &UniformGrid,
    geom: &FaceGeometry,
    bc: BcFn<'_>,
    source: Option<&[f64]>,
) -> (StencilMatrix, Vec<f64>) {
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut a = StencilMatrix::zeros(nx, ny);
    let mut rhs = match source {
        Some(s) => s.to_vec(),
        None => vec![0.0; grid.len()],
    };
    for j in 0..ny {
        for i in 0..=nx {
            let t = geom.tx[i + (nx + 1) * j];
            if i == 0 || i == nx {
                let side = usize::from(i == nx);
                let c = grid.index(if i == 0 { 0 } else { nx - 1 }, j);
                if let FaceBc::Dirichlet(g) = bc(0, side, x_face_center(grid, i, j)) {
                    a.diag[c] += t;
                    rhs[c] += t * g;
                }
            } else {
                let (l, r) = (grid.index(i - 1, j), grid.index(i, j));
                a.diag[l] += t;
                a.diag[r] += t;
                a.east[l] = t;
            }
        }
    }
    if grid.dim() == 2 {
        for j in 0..=ny {
            for i in 0..nx {
                let t = geom.ty[i + nx * j];
                if j == 0 || j == ny {
                    let side = usize::from(j == ny);
                    let c = grid.index(i, if j == 0 { 0 } else { ny - 1 });
                    if let FaceBc::Dirichlet(g) = bc(1, side, y_face_center(grid, i, j)) {
                        a.diag[c] += t;
                        rhs[c] += t * g;
                    }
                } else {
                    let (s, n) = (grid.index(i, j - 1), grid.index(i, j));
                    a.diag[s] += t;
                    a.diag[n] += t;
                    a.north[s] = t;
                }
            }
        }
    }
    (a, rhs)
}

/// Jumps `u_high - u_low` across every face; `None` on no-flow faces.
pub(crate) struct FaceJumps {
    pub x: Vec<Option<f64>>,
    pub y: Vec<Option<f64>>,
}

pub(crate) fn face_jumps(grid: &UniformGrid, u: &[f64], bc: BcFn<'_>) -> FaceJumps {
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut x = vec![None; (nx + 1) * ny];
    for j in 0..ny {
        for i in 0..=nx {
            let f = i + (nx + 1) * j;
            x[f] = if i == 0 {
                match bc(0, 0, x_face_center(grid, i, j)) {
                    FaceBc::Dirichlet(g) => Some(u[grid.index(0, j)] - g),
                    FaceBc::NoFlow => None,
                }
            } else if i == nx {
                match bc(0, 1, x_face_center(grid, i, j)) {
                    FaceBc::Dirichlet(g) => Some(g - u[grid.index(nx - 1, j)]),
                    FaceBc::NoFlow => None,
                }
            } else {
                Some(u[grid.index(i, j)] - u[grid.index(i - 1, j)])
            };
        }
    }
    let mut y = Vec::new();
    if grid.dim() == 2 {
        y = vec![None; nx * (ny + 1)];
        for j in 0..=ny {
            for i in 0..nx {
                let f = i + nx * j;
                y[f] = if j == 0 {
                    match bc(1, 0, y_face_center(grid, i, j)) {
                        FaceBc::Dirichlet(g) => Some(u[grid.index(i, 0)] - g),
                        FaceBc::NoFlow => None,
                    }
                } else if j == ny {
                    match bc(1, 1, y_face_center(grid, i, j)) {
                        FaceBc::Dirichlet(g) => Some(g - u[grid.index(i, ny - 1)]),
                        FaceBc::NoFlow => None,
                    }
                } else {
                    Some(u[grid.index(i, j)] - u[grid.index(i, j - 1)])
                };
            }
        }
    }
    FaceJumps { x, y }
}
