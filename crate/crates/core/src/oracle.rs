//! Analytic shape oracles: desk-scale ground truth providing exact
//! occupancy tests and area-weighted surface sampling with outward normals.
//! All shapes live in normalized units (the unit cube).

use crate::{Error, Result, Rng};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeOracle {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// Ring in the xy-plane around `center`, tube radius `minor_radius`.
    Torus {
        center: [f64; 3],
        major_radius: f64,
        minor_radius: f64,
    },
    /// Thin axis-aligned slab: a box of the given in-plane half extents and
    /// total thickness along z.
    ThinPlate {
        center: [f64; 3],
        half_extents: [f64; 2],
        thickness: f64,
    },
    Union {
        parts: Vec<ShapeOracle>,
    },
}

impl ShapeOracle {
    /// Named presets accepted by the CLI as `oracle:<name>`.
    pub fn preset(name: &str) -> Result<ShapeOracle> {
        let c = [0.5, 0.5, 0.5];
        Ok(match name {
            "sphere" => ShapeOracle::Sphere {
                center: c,
                radius: 0.3,
            },
            "box" => ShapeOracle::Box {
                center: c,
                half_extents: [0.25, 0.2, 0.15],
            },
            "torus" => ShapeOracle::Torus {
                center: c,
                major_radius: 0.25,
                minor_radius: 0.08,
            },
            "thin_plate" => ShapeOracle::ThinPlate {
                center: c,
                half_extents: [0.25, 0.25],
                thickness: 0.02,
            },
            "two_spheres" => ShapeOracle::Union {
                parts: vec![
                    ShapeOracle::Sphere {
                        center: [0.35, 0.35, 0.35],
                        radius: 0.18,
                    },
                    ShapeOracle::Sphere {
                        center: [0.62, 0.62, 0.62],
                        radius: 0.22,
                    },
                ],
            },
            other => {
                return Err(Error::invalid(format!(
                    "unknown oracle preset `{other}` (try sphere, box, torus, thin_plate, two_spheres)"
                )))
            }
        })
    }

    /// Exact inside test.
    pub fn occupancy(&self, p: [f64; 3]) -> bool {
        match self {
            ShapeOracle::Sphere { center, radius } => dist2(p, *center) <= radius * radius,
            ShapeOracle::Box {
                center,
                half_extents,
            } => (0..3).all(|a| (p[a] - center[a]).abs() <= half_extents[a]),
            ShapeOracle::Torus {
                center,
                major_radius,
                minor_radius,
            } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                let dz = p[2] - center[2];
                let ring = (dx * dx + dy * dy).sqrt() - major_radius;
                ring * ring + dz * dz <= minor_radius * minor_radius
            }
            ShapeOracle::ThinPlate {
                center,
                half_extents,
                thickness,
            } => {
                (p[0] - center[0]).abs() <= half_extents[0]
                    && (p[1] - center[1]).abs() <= half_extents[1]
                    && (p[2] - center[2]).abs() <= 0.5 * thickness
            }
            ShapeOracle::Union { parts } => parts.iter().any(|s| s.occupancy(p)),
        }
    }

    /// Total surface area (union parts counted individually; rejection
    /// sampling handles occluded patches).
    pub fn area(&self) -> f64 {
        match self {
            ShapeOracle::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            ShapeOracle::Box { half_extents: h, .. } => {
                8.0 * (h[0] * h[1] + h[0] * h[2] + h[1] * h[2])
            }
            ShapeOracle::Torus {
                major_radius,
                minor_radius,
                ..
            } => 4.0 * std::f64::consts::PI * std::f64::consts::PI * major_radius * minor_radius,
            ShapeOracle::ThinPlate {
                half_extents: h,
                thickness,
                ..
            } => 8.0 * (h[0] * h[1] + (h[0] + h[1]) * 0.5 * thickness),
            ShapeOracle::Union { parts } => parts.iter().map(|s| s.area()).sum(),
        }
    }

    /// One area-weighted surface sample with its outward normal. For unions
    /// the sample is drawn on the boundary of the union (interior patches
    /// are rejected).
    pub fn surface_sample_one(&self, rng: &mut Rng) -> ([f64; 3], [f64; 3]) {
        match self {
            ShapeOracle::Sphere { center, radius } => {
                let n = rng.unit_vector();
                (
                    [
                        center[0] + radius * n[0],
                        center[1] + radius * n[1],
                        center[2] + radius * n[2],
                    ],
                    n,
                )
            }
            ShapeOracle::Box {
                center,
                half_extents: h,
            } => sample_box_surface(*center, *h, rng),
            ShapeOracle::Torus {
                center,
                major_radius,
                minor_radius,
            } => {
                let two_pi = 2.0 * std::f64::consts::PI;
                let theta = rng.uniform(0.0, two_pi);
                // Area element is proportional to R + r cos(phi).
                let phi = loop {
                    let phi = rng.uniform(0.0, two_pi);
                    let accept = (major_radius + minor_radius * phi.cos())
                        / (major_radius + minor_radius);
                    if rng.next_f64() < accept {
                        break phi;
                    }
                };
                let ring = major_radius + minor_radius * phi.cos();
                let p = [
                    center[0] + ring * theta.cos(),
                    center[1] + ring * theta.sin(),
                    center[2] + minor_radius * phi.sin(),
                ];
                let n = [phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin()];
                (p, n)
            }
            ShapeOracle::ThinPlate {
                center,
                half_extents,
                thickness,
            } => sample_box_surface(
                *center,
                [half_extents[0], half_extents[1], 0.5 * thickness],
                rng,
            ),
            ShapeOracle::Union { parts } => {
                let total: f64 = parts.iter().map(|s| s.area()).sum();
                loop {
                    // Pick a part by area, sample it, reject interior points.
                    let mut pick = rng.uniform(0.0, total);
                    let mut chosen = parts.len() - 1;
                    for (i, s) in parts.iter().enumerate() {
                        pick -= s.area();
                        if pick <= 0.0 {
                            chosen = i;
                            break;
                        }
                    }
                    let (p, n) = parts[chosen].surface_sample_one(rng);
                    let buried = parts
                        .iter()
                        .enumerate()
                        .any(|(i, s)| i != chosen && s.strictly_inside(p));
                    if !buried {
                        return (p, n);
                    }
                }
            }
        }
    }

    fn strictly_inside(&self, p: [f64; 3]) -> bool {
        // Shrink by a hair so shared boundaries do not reject their own
        // surface points.
        const EPS: f64 = 1e-9;
        match self {
            ShapeOracle::Sphere { center, radius } => dist2(p, *center) < (radius - EPS).powi(2),
            ShapeOracle::Box {
                center,
                half_extents,
            } => (0..3).all(|a| (p[a] - center[a]).abs() < half_extents[a] - EPS),
            ShapeOracle::Torus {
                center,
                major_radius,
                minor_radius,
            } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                let dz = p[2] - center[2];
                let ring = (dx * dx + dy * dy).sqrt() - major_radius;
                ring * ring + dz * dz < (minor_radius - EPS).powi(2)
            }
            ShapeOracle::ThinPlate {
                center,
                half_extents,
                thickness,
            } => {
                (p[0] - center[0]).abs() < half_extents[0] - EPS
                    && (p[1] - center[1]).abs() < half_extents[1] - EPS
                    && (p[2] - center[2]).abs() < 0.5 * thickness - EPS
            }
            ShapeOracle::Union { parts } => parts.iter().any(|s| s.strictly_inside(p)),
        }
    }

    /// `n` surface samples with outward normals.
    pub fn surface_samples(&self, n: usize, rng: &mut Rng) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
        let mut pts = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        for _ in 0..n {
            let (p, nm) = self.surface_sample_one(rng);
            pts.push(p);
            normals.push(nm);
        }
        (pts, normals)
    }

    /// Monte-Carlo volume estimate (unit-cube probes).
    pub fn volume_estimate(&self, probes: usize, rng: &mut Rng) -> f64 {
        let mut hit = 0usize;
        for _ in 0..probes {
            let p = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
            if self.occupancy(p) {
                hit += 1;
            }
        }
        hit as f64 / probes as f64
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn sample_box_surface(center: [f64; 3], h: [f64; 3], rng: &mut Rng) -> ([f64; 3], [f64; 3]) {
    // Pick a face pair by area, then a sign.
    let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.uniform(0.0, total);
    let mut axis = 2;
    for (a, &ar) in areas.iter().enumerate() {
        if pick < ar {
            axis = a;
            break;
        }
        pick -= ar;
    }
    let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
    let mut p = center;
    p[axis] += sign * h[axis];
    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
    p[u] = center[u] + rng.uniform(-h[u], h[u]);
    p[v] = center[v] + rng.uniform(-h[v], h[v]);
    let mut n = [0.0; 3];
    n[axis] = sign;
    (p, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_inside_outside() {
        let s = ShapeOracle::preset("sphere").unwrap();
        assert!(s.occupancy([0.5, 0.5, 0.5]));
        assert!(!s.occupancy([0.5 + 0.3 + 1e-6, 0.5, 0.5]));
        assert!(s.occupancy([0.5 + 0.3 - 1e-6, 0.5, 0.5]));
    }

    #[test]
    fn surface_samples_sit_on_the_boundary() {
        let mut rng = Rng::new(1);
        for name in ["sphere", "box", "torus", "thin_plate", "two_spheres"] {
            let s = ShapeOracle::preset(name).unwrap();
            let (pts, normals) = s.surface_samples(500, &mut rng);
            for (p, n) in pts.iter().zip(&normals) {
                // Stepping slightly along the outward normal exits the
                // shape; stepping inward stays inside.
                let eps = 1e-5;
                let outside = [p[0] + eps * n[0], p[1] + eps * n[1], p[2] + eps * n[2]];
                let inside = [p[0] - eps * n[0], p[1] - eps * n[1], p[2] - eps * n[2]];
                assert!(!s.occupancy(outside), "{name}: {outside:?} not outside");
                assert!(s.occupancy(inside), "{name}: {inside:?} not inside");
            }
        }
    }

    #[test]
    fn box_face_counts_proportional_to_area() {
        // Chi-square against face-area ratios.
        let s = ShapeOracle::Box {
            center: [0.5; 3],
            half_extents: [0.3, 0.2, 0.1],
        };
        let mut rng = Rng::new(2);
        let n = 60_000;
        let (pts, normals) = s.surface_samples(n, &mut rng);
        let mut counts = [0usize; 6];
        for (_, nm) in pts.iter().zip(&normals) {
            let axis = (0..3).find(|&a| nm[a] != 0.0).unwrap();
            let idx = axis * 2 + usize::from(nm[axis] > 0.0);
            counts[idx] += 1;
        }
        let h = [0.3, 0.2, 0.1];
        let face_areas = [
            h[1] * h[2],
            h[1] * h[2],
            h[0] * h[2],
            h[0] * h[2],
            h[0] * h[1],
            h[0] * h[1],
        ];
        let total_area: f64 = face_areas.iter().sum();
        let mut chi2 = 0.0;
        for (c, a) in counts.iter().zip(&face_areas) {
            let expected = n as f64 * a / total_area;
            chi2 += (*c as f64 - expected).powi(2) / expected;
        }
        // 5 degrees of freedom; 20.5 is the 0.1% critical value.
        assert!(chi2 < 20.5, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn thin_plate_volume_matches_thickness_times_area() {
        let s = ShapeOracle::ThinPlate {
            center: [0.5; 3],
            half_extents: [0.25, 0.25],
            thickness: 0.01,
        };
        let mut rng = Rng::new(3);
        let v = s.volume_estimate(2_000_000, &mut rng);
        let expect = 0.5 * 0.5 * 0.01;
        assert!((v - expect).abs() < 2e-4, "{v} vs {expect}");
    }

    #[test]
    fn union_occupancy_is_disjunction() {
        let u = ShapeOracle::preset("two_spheres").unwrap();
        assert!(u.occupancy([0.35, 0.35, 0.35]));
        assert!(u.occupancy([0.62, 0.62, 0.62]));
        assert!(!u.occupancy([0.05, 0.05, 0.9]));
    }

    #[test]
    fn oracle_json_roundtrip() {
        let u = ShapeOracle::preset("two_spheres").unwrap();
        let json = serde_json::to_string(&u).unwrap();
        let back: ShapeOracle = serde_json::from_str(&json).unwrap();
        assert_eq!(u, back);
    }
}
