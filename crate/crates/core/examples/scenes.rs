//! Generate a few synthetic scenes, simulate LiDAR, rasterize, and save one
//! to disk in the text format.

use sadrive::scene::{generate_scene, rasterize, rasterize_labels, save_scene, simulate_lidar, Difficulty};

fn main() -> sadrive::Result<()> {
    for (k, d) in Difficulty::ALL.iter().enumerate() {
        let scene = generate_scene(k as u64, *d);
        let points = simulate_lidar(&scene, 0)?;
        let bev = rasterize(&scene)?;
        let labels = rasterize_labels(&scene)?;
        println!(
            "{:>7}: {} actors, {} lanes, {} lidar returns, {} BEV channels, {} positive cells",
            d.name(),
            scene.actors.len(),
            scene.lanes.len(),
            points.len(),
            bev.channels(),
            labels.positives()
        );
    }
    let dir = std::env::temp_dir().join("sadrive-example");
    std::fs::create_dir_all(&dir).map_err(|e| sadrive::Error::Io { path: dir.clone(), source: e })?;
    let path = dir.join("scene.txt");
    save_scene(&path, &generate_scene(7, Difficulty::Dense))?;
    println!("saved {}", path.display());
    Ok(())
}
