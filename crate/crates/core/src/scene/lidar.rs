use super::raster::{map_layers, MapLayers};
use super::*;

/// Azimuth rays per sweep.
pub const LIDAR_RAYS: usize = 720;
/// Maximum return distance in meters.
pub const LIDAR_RANGE: f64 = 60.0;
const FIRST_RING: f64 = 1.5;
const RING_GROWTH: f64 = 1.07;
/// Heights at which a vehicle side returns points.
const BODY_HEIGHTS: [f64; 2] = [0.6, 1.3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Returns of one past sweep, expressed in the current ego frame. Each ray
/// stops at the nearest actor; ground returns are kept only where they land
/// on the lane surface.
pub fn simulate_lidar(scene: &Scene, sweep: usize) -> Result<Vec<LidarPoint>> {
    let maps = map_layers(scene)?;
    simulate_with(scene, sweep, &maps)
}

pub(super) fn simulate_with(scene: &Scene, sweep: usize, maps: &MapLayers) -> Result<Vec<LidarPoint>> {
    if sweep >= PAST_SWEEPS {
        return Err(Error::invalid(format!("sweep {sweep} outside [0, {PAST_SWEEPS})")));
    }
    let origin = scene.ego_at_sweep(sweep);
    let o = [origin.x, origin.y];
    let boxes: Vec<OrientedBox> = scene.actors.iter().map(|a| a.box_at_sweep(sweep)).collect();
    let mut rings = Vec::new();
    let mut r = FIRST_RING;
    while r < LIDAR_RANGE {
        rings.push(r);
        r *= RING_GROWTH;
    }
    let mut points = Vec::new();
    for k in 0..LIDAR_RAYS {
        let az = 2.0 * std::f64::consts::PI * k as f64 / LIDAR_RAYS as f64;
        let dir = [az.cos(), az.sin()];
        let hit = boxes
            .iter()
            .filter_map(|b| b.ray_hit(o, dir))
            .filter(|&t| t <= LIDAR_RANGE)
            .fold(f64::INFINITY, f64::min);
        for &r in rings.iter().take_while(|&&r| r < hit) {
            let p = [o[0] + r * dir[0], o[1] + r * dir[1]];
            if maps.surface_at(&scene.grid, p) {
                points.push(LidarPoint { x: p[0], y: p[1], z: 0.0 });
            }
        }
        if hit.is_finite() {
            let p = [o[0] + hit * dir[0], o[1] + hit * dir[1]];
            points.extend(BODY_HEIGHTS.iter().map(|&z| LidarPoint { x: p[0], y: p[1], z }));
        }
    }
    Ok(points)
}
