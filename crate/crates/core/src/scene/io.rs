use std::path::Path;

use super::*;

/// First line of every scene file.
pub const SCENE_MAGIC: &str = "sadrive-scene v1";

impl Scene {
    /// Versioned header line followed by a TOML body.
    pub fn to_text(&self) -> String {
        let body = toml::to_string(self).expect("scene fields are all representable");
        format!("{SCENE_MAGIC}\n{body}")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::Format { what: "scene file", detail: d };
        let (head, body) = text.split_once('\n').ok_or_else(|| bad("missing header line".into()))?;
        if head.trim_end() != SCENE_MAGIC {
            return Err(bad(format!("expected header {SCENE_MAGIC:?}, found {head:?}")));
        }
        let scene: Scene = toml::from_str(body).map_err(|e| bad(e.to_string()))?;
        if scene.ego_track.len() != PAST_SWEEPS + FUTURE_STEPS {
            return Err(bad(format!("ego track has {} poses", scene.ego_track.len())));
        }
        for a in &scene.actors {
            if a.future_track.len() != FUTURE_STEPS || a.past_track.len() != PAST_SWEEPS {
                return Err(bad("actor track length".into()));
            }
            if !(a.size[0] > 0.0 && a.size[1] > 0.0) {
                return Err(bad(format!("actor size {:?}", a.size)));
            }
        }
        Ok(scene)
    }
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    std::fs::write(path, scene.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Scene::from_text(&text)
}
