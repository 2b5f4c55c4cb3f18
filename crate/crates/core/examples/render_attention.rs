//! Write the mask PGM and the composite PPM (map gray, actors green, ego
//! blue, plan cyan, attention red) for a few scenes and baseline masks.

use sadrive::attention::{baseline_mask, MaskSource};
use sadrive::scene::{generate_scene, Difficulty};
use sadrive::train::render;

fn main() -> sadrive::Result<()> {
    let dir = std::env::temp_dir().join("sadrive-render");
    std::fs::create_dir_all(&dir).map_err(|e| sadrive::Error::Io { path: dir.clone(), source: e })?;
    for (k, source) in [MaskSource::Road, MaskSource::Vehicle, MaskSource::Proximity].into_iter().enumerate() {
        let scene = generate_scene(k as u64 + 30, Difficulty::Urban);
        let mask = baseline_mask(source, &scene)?;
        let r = render(&scene, &mask, scene.ego_future())?;
        let base = dir.join(format!("{}_{k}", source.name()));
        let write = |ext: &str, bytes: &[u8]| {
            let p = base.with_extension(ext);
            std::fs::write(&p, bytes).map_err(|e| sadrive::Error::Io { path: p, source: e })
        };
        write("pgm", &r.mask_pgm)?;
        write("ppm", &r.composite_ppm)?;
        println!("{}: {} red and {} green pixels of {}", base.display(), r.red_pixels(), r.green_pixels(), r.rows * r.cols);
    }
    Ok(())
}
