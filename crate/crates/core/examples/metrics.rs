//! Planning and detection metrics on logged data: the logged trajectory
//! scores zero L2 and no collisions, a swerving plan does not, and
//! ground-truth boxes used as detections give perfect mAP.

use sadrive::attention::{baseline_mask, MaskSource};
use sadrive::eval::{detection_map, metrics_table, Detection, Membership, MetricsReport, SceneDetections, SceneEval};
use sadrive::geometry::Pose;
use sadrive::scene::{generate_scene, Difficulty};

fn main() -> sadrive::Result<()> {
    let mut logged = Vec::new();
    let mut swerve = Vec::new();
    let mut dets = Vec::new();
    for seed in 0..20 {
        let scene = generate_scene(seed, Difficulty::ALL[seed as usize % 3]);
        let mask = baseline_mask(MaskSource::Proximity, &scene)?;
        let gt: Vec<Detection> = scene.actors.iter().map(|a| Detection { bbox: a.bbox(), score: 0.9 }).collect();
        let off: Vec<Pose> = scene.ego_future().iter().enumerate().map(|(k, p)| Pose::new(p.x, p.y + 1.5 * k as f64, p.theta)).collect();
        logged.push(SceneEval::new(&scene, scene.ego_future(), gt.clone(), &mask, Membership::CenterCell)?);
        swerve.push(SceneEval::new(&scene, &off, Vec::new(), &mask, Membership::CenterCell)?);
        dets.push(SceneDetections::from_scene(&scene, gt));
    }
    let reports = [MetricsReport::aggregate("logged", &logged, 0), MetricsReport::aggregate("swerve", &swerve, 0)];
    print!("{}", metrics_table(&reports));
    println!("ground truth as detections: mAP {:?}", detection_map(&dets));
    Ok(())
}
