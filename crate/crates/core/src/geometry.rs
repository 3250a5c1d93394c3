//! Sonar coordinate conversions, fan field-of-view masking, and
//! pixel ↔ metric mappings.
//!
//! Raster convention: the sonar apex sits at the bottom-center pixel of the
//! image and range grows upward. Azimuth is measured from the vertical
//! (range) axis, positive toward +x. All angles are radians internally;
//! degrees appear only at file-format and CLI boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;

/// A point in sonar polar coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarPoint {
    /// Range in meters, non-negative.
    pub range_m: f64,
    /// Azimuth angle in radians.
    pub azimuth_rad: f64,
    /// Elevation angle in radians.
    pub elevation_rad: f64,
}

/// A point in Euclidean sensor coordinates, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EuclideanPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EuclideanPoint {
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// Metric calibration of a sonar raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageCalibration {
    /// Spatial resolution of the raster, meters per pixel.
    pub meters_per_pixel: f64,
    /// Imaging frame rate, frames per second.
    pub fps: f64,
    /// Full azimuth field of view, degrees.
    pub fov_azimuth_deg: f64,
    /// Nearest imaged range, meters.
    pub range_min_m: f64,
    /// Farthest imaged range, meters.
    pub range_max_m: f64,
}

impl ImageCalibration {
    pub fn validate(&self) -> Result<()> {
        if !(self.meters_per_pixel > 0.0) {
            return Err(Error::invalid_param(
                "meters_per_pixel",
                format!("must be > 0, got {}", self.meters_per_pixel),
            ));
        }
        if !(self.fps > 0.0) {
            return Err(Error::invalid_param(
                "fps",
                format!("must be > 0, got {}", self.fps),
            ));
        }
        if !(self.fov_azimuth_deg > 0.0) {
            return Err(Error::invalid_param(
                "fov_azimuth_deg",
                format!("must be > 0, got {}", self.fov_azimuth_deg),
            ));
        }
        if !(self.range_min_m >= 0.0 && self.range_min_m < self.range_max_m) {
            return Err(Error::invalid_param(
                "range_min_m/range_max_m",
                format!(
                    "require 0 <= min < max, got min={} max={}",
                    self.range_min_m, self.range_max_m
                ),
            ));
        }
        Ok(())
    }

    /// Converts a metric speed to the per-frame pixel displacement it produces.
    pub fn speed_to_px_per_frame(&self, speed_mps: f64) -> f64 {
        speed_mps / (self.meters_per_pixel * self.fps)
    }

    /// Metric speed of a per-frame pixel displacement magnitude.
    pub fn px_per_frame_to_speed(&self, displacement_px: f64) -> f64 {
        displacement_px * self.meters_per_pixel * self.fps
    }
}

/// Converts sonar polar coordinates to Euclidean sensor coordinates.
///
/// Negative range is rejected as an input error.
pub fn polar_to_euclidean(p: PolarPoint) -> Result<EuclideanPoint> {
    if p.range_m < 0.0 {
        return Err(Error::invalid_param(
            "range_m",
            format!("must be >= 0, got {}", p.range_m),
        ));
    }
    let (sin_az, cos_az) = p.azimuth_rad.sin_cos();
    let (sin_el, cos_el) = p.elevation_rad.sin_cos();
    Ok(EuclideanPoint {
        x: p.range_m * cos_el * cos_az,
        y: p.range_m * cos_el * sin_az,
        z: p.range_m * sin_el,
    })
}

/// Inverse of [`polar_to_euclidean`]. At the origin returns range 0 with both
/// angles 0 by convention, making the inverse total.
pub fn euclidean_to_polar(e: EuclideanPoint) -> PolarPoint {
    let range = e.norm();
    if range == 0.0 {
        return PolarPoint {
            range_m: 0.0,
            azimuth_rad: 0.0,
            elevation_rad: 0.0,
        };
    }
    PolarPoint {
        range_m: range,
        azimuth_rad: e.y.atan2(e.x),
        elevation_rad: (e.z / range).clamp(-1.0, 1.0).asin(),
    }
}

/// Raster position of the sonar apex: bottom-center pixel center.
pub fn fan_apex(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, height as f64 - 1.0)
}

/// Range (meters) and azimuth (radians) of a raster position under `cal`.
///
/// Accepts fractional pixel coordinates so blob centroids map directly.
pub fn pixel_polar(
    cal: &ImageCalibration,
    width: usize,
    height: usize,
    x: f64,
    y: f64,
) -> (f64, f64) {
    let (ax, ay) = fan_apex(width, height);
    let dx = x - ax;
    let dy = ay - y; // range axis points up the raster
    let range_m = (dx * dx + dy * dy).sqrt() * cal.meters_per_pixel;
    let azimuth_rad = dx.atan2(dy);
    (range_m, azimuth_rad)
}

/// True when the raster position falls inside the calibrated fan.
pub fn fan_contains(cal: &ImageCalibration, width: usize, height: usize, x: f64, y: f64) -> bool {
    let (range_m, azimuth_rad) = pixel_polar(cal, width, height, x, y);
    let half_fov = cal.fov_azimuth_deg.to_radians() / 2.0;
    range_m >= cal.range_min_m && range_m <= cal.range_max_m && azimuth_rad.abs() <= half_fov
}

/// Binary mask of the fan-shaped field of view on a `width` × `height` raster.
pub fn fan_mask(width: usize, height: usize, cal: &ImageCalibration) -> Result<Mask> {
    if width == 0 || height == 0 {
        return Err(Error::ZeroSizedImage);
    }
    cal.validate()?;
    Ok(Mask::from_fn(width, height, |x, y| {
        fan_contains(cal, width, height, x as f64, y as f64)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn cal(fov_deg: f64, range_min: f64, range_max: f64, mpp: f64) -> ImageCalibration {
        ImageCalibration {
            meters_per_pixel: mpp,
            fps: 10.0,
            fov_azimuth_deg: fov_deg,
            range_min_m: range_min,
            range_max_m: range_max,
        }
    }

    #[test]
    fn polar_axis_cases() {
        let e = polar_to_euclidean(PolarPoint {
            range_m: 1.0,
            azimuth_rad: 0.0,
            elevation_rad: 0.0,
        })
        .unwrap();
        assert_abs_diff_eq!(e.x, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.y, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.z, 0.0, epsilon = 1e-15);

        let e = polar_to_euclidean(PolarPoint {
            range_m: 2.0,
            azimuth_rad: FRAC_PI_2,
            elevation_rad: 0.0,
        })
        .unwrap();
        assert_abs_diff_eq!(e.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.y, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.z, 0.0, epsilon = 1e-15);

        let e = polar_to_euclidean(PolarPoint {
            range_m: 1.0,
            azimuth_rad: 0.0,
            elevation_rad: FRAC_PI_2,
        })
        .unwrap();
        assert_abs_diff_eq!(e.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.y, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.z, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn negative_range_rejected() {
        assert!(polar_to_euclidean(PolarPoint {
            range_m: -1.0,
            azimuth_rad: 0.0,
            elevation_rad: 0.0,
        })
        .is_err());
    }

    #[test]
    fn inverse_axis_and_origin() {
        let p = euclidean_to_polar(EuclideanPoint {
            x: 1.0,
            y: 0.0,
            z: 0.0,
        });
        assert_abs_diff_eq!(p.range_m, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.azimuth_rad, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.elevation_rad, 0.0, epsilon = 1e-15);

        let p = euclidean_to_polar(EuclideanPoint {
            x: 0.0,
            y: 0.0,
            z: 0.0,
        });
        assert_eq!(p.range_m, 0.0);
        assert_eq!(p.azimuth_rad, 0.0);
        assert_eq!(p.elevation_rad, 0.0);
    }

    #[test]
    fn inverse_diagonal_hand_check() {
        // Hand trigonometry: (0.5, 0.5, 0) has range sqrt(0.5) and azimuth 45 deg.
        let p = euclidean_to_polar(EuclideanPoint {
            x: 0.5,
            y: 0.5,
            z: 0.0,
        });
        assert_abs_diff_eq!(p.range_m, 0.5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(p.azimuth_rad, FRAC_PI_4, epsilon = 1e-15);
        assert_abs_diff_eq!(p.elevation_rad, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn fan_mask_full_fan_is_upper_half_disc() {
        let c = cal(180.0, 0.0, 0.04, 0.001); // radius 40 px
        let mask = fan_mask(101, 60, &c).unwrap();
        let (ax, ay) = fan_apex(101, 60);
        for (x, y, &inside) in mask.iter_pixels() {
            let dx = x as f64 - ax;
            let dy = ay - y as f64;
            let expected = dy >= 0.0 && (dx * dx + dy * dy).sqrt() <= 40.0;
            assert_eq!(inside, expected, "pixel ({x},{y})");
        }
    }

    #[test]
    fn fan_mask_excludes_outside_half_angle() {
        let c = cal(30.0, 0.0, 1.0, 0.001);
        // A pixel at azimuth 20 degrees, range 100 px from the apex.
        let (ax, ay) = fan_apex(512, 512);
        let az = 20f64.to_radians();
        let x = ax + 100.0 * az.sin();
        let y = ay - 100.0 * az.cos();
        assert!(!fan_contains(&c, 512, 512, x, y));
        // Same range at 10 degrees is inside.
        let az = 10f64.to_radians();
        let x = ax + 100.0 * az.sin();
        let y = ay - 100.0 * az.cos();
        assert!(fan_contains(&c, 512, 512, x, y));
    }

    #[test]
    fn fan_mask_pixel_count_matches_sector_area() {
        // Annular sector of half-angle 14.4 deg between 200 and 900 px.
        let c = cal(28.8, 2.0, 9.0, 0.01);
        let mask = fan_mask(1024, 1024, &c).unwrap();
        let fov_rad = 28.8f64.to_radians();
        let (r0, r1) = (200.0f64, 900.0f64);
        let analytic = fov_rad / 2.0 * (r1 * r1 - r0 * r0);
        let counted = mask.count() as f64;
        let rel = (counted - analytic).abs() / analytic;
        assert!(
            rel < 0.01,
            "pixel count {counted} vs analytic {analytic} (rel {rel:.4})"
        );
    }

    #[test]
    fn fan_mask_monotone_in_fov() {
        for (narrow, wide) in [(15.0, 30.0), (30.0, 90.0), (90.0, 180.0)] {
            let m1 = fan_mask(64, 64, &cal(narrow, 0.0, 0.05, 0.001)).unwrap();
            let m2 = fan_mask(64, 64, &cal(wide, 0.0, 0.05, 0.001)).unwrap();
            assert!(m1.is_subset_of(&m2), "fov {narrow} not within {wide}");
        }
    }

    #[test]
    fn fan_mask_zero_size_rejected() {
        assert!(fan_mask(0, 32, &cal(30.0, 0.0, 1.0, 0.001)).is_err());
    }

    #[test]
    fn speed_conversion_round_trip() {
        let c = cal(30.0, 0.0, 1.0, 0.0029);
        let px = c.speed_to_px_per_frame(0.23);
        assert_abs_diff_eq!(px, 7.931034482758621, epsilon = 1e-12);
        assert_abs_diff_eq!(c.px_per_frame_to_speed(px), 0.23, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn round_trip_polar_euclidean(
            x in -100.0f64..100.0,
            y in -100.0f64..100.0,
            z in -100.0f64..100.0,
        ) {
            let e = EuclideanPoint { x, y, z };
            let back = polar_to_euclidean(euclidean_to_polar(e)).unwrap();
            let tol = 1e-9 * (1.0 + e.norm());
            prop_assert!((back.x - x).abs() <= tol);
            prop_assert!((back.y - y).abs() <= tol);
            prop_assert!((back.z - z).abs() <= tol);
        }

        #[test]
        fn norm_preserved(
            r in 0.0f64..100.0,
            az in -std::f64::consts::PI..std::f64::consts::PI,
            el in -1.5f64..1.5,
        ) {
            let e = polar_to_euclidean(PolarPoint {
                range_m: r,
                azimuth_rad: az,
                elevation_rad: el,
            }).unwrap();
            prop_assert!((e.norm() - r).abs() <= 1e-12 * r.max(1.0));
        }
    }
}
