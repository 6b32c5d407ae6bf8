//! Text containers: scene files, panoptic maps as graymaps, and the shared
//! header-line convention `<magic> <major>.<minor>`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde_json::Value;

use super::scene::{Motion, SceneSequence};
use crate::error::{Error, Result};
use crate::refine::PanopticMap;

pub const SCENE_MAGIC: &str = "pforecast-scene";
pub const SCENE_VERSION: (u32, u32) = (1, 1);

fn version_error(kind: &'static str, found: &str, expected: (u32, u32)) -> Error {
    Error::Version {
        kind,
        found: found.trim().to_string(),
        expected: format!("{}.{}", expected.0, expected.1),
    }
}

/// Parses `<magic> <major>.<minor>`, returning the minor version.
fn parse_header(kind: &'static str, line: &str, magic: &str, current: (u32, u32)) -> Result<u32> {
    let mut parts = line.split_whitespace();
    let (Some(m), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(version_error(kind, line, current));
    };
    let parsed = v.split_once('.').and_then(|(a, b)| Some((a.parse::<u32>().ok()?, b.parse::<u32>().ok()?)));
    match parsed {
        Some((major, minor)) if m == magic && major == current.0 && minor <= current.1 => Ok(minor),
        _ => Err(version_error(kind, line, current)),
    }
}

/// Scene body as a JSON value, upgraded to the current minor version.
///
/// 1.0 files predate the `seed` and `motion` fields; they load as seed 0
/// and constant-velocity motion.
fn upgrade(minor: u32, mut body: Value) -> Result<Value> {
    let obj = body.as_object_mut().ok_or_else(|| Error::Format {
        kind: "scene",
        detail: "body is not an object".into(),
    })?;
    if minor == 0 {
        for key in ["seed", "motion"] {
            if obj.contains_key(key) {
                return Err(Error::Format {
                    kind: "scene",
                    detail: format!("field {key:?} is not part of version 1.0"),
                });
            }
        }
        obj.insert("seed".into(), Value::from(0u64));
        obj.insert("motion".into(), serde_json::to_value(Motion::ConstantVelocity).expect("enum"));
    }
    Ok(body)
}

pub fn write_scene<W: Write>(scene: &SceneSequence, mut out: W) -> Result<()> {
    writeln!(out, "{SCENE_MAGIC} {}.{}", SCENE_VERSION.0, SCENE_VERSION.1)?;
    serde_json::to_writer(&mut out, scene).map_err(|e| Error::Format {
        kind: "scene",
        detail: e.to_string(),
    })?;
    writeln!(out)?;
    Ok(())
}

pub fn read_scene<R: BufRead>(mut input: R) -> Result<SceneSequence> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let minor = parse_header("scene", &header, SCENE_MAGIC, SCENE_VERSION)?;
    let body: Value = serde_json::from_reader(input).map_err(|e| Error::Format {
        kind: "scene",
        detail: e.to_string(),
    })?;
    let body = upgrade(minor, body)?;
    let scene: SceneSequence = serde_json::from_value(body).map_err(|e| Error::Format {
        kind: "scene",
        detail: e.to_string(),
    })?;
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(scene: &SceneSequence, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_scene(scene, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<SceneSequence> {
    let f = std::fs::File::open(path)?;
    read_scene(std::io::BufReader::new(f))
}

/// Plain graymap (`P2`) of `class · 1000 + instance` per pixel.
pub fn write_panoptic_pgm<W: Write>(map: &PanopticMap, mut out: W) -> Result<()> {
    let ids = map.encoded();
    let max = ids.iter().copied().max().unwrap_or(0).max(1);
    if max > 65535 {
        return Err(Error::Contract(format!("panoptic id {max} does not fit a 16-bit graymap")));
    }
    writeln!(out, "P2\n# panoptic class*{}+instance\n{} {}\n{max}", PanopticMap::ID_STRIDE, map.width, map.height)?;
    for row in ids.chunks(map.width) {
        let line: Vec<String> = row.iter().map(usize::to_string).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Reads whitespace-separated graymap tokens, skipping `#` comments.
pub fn read_pgm_values(text: &str) -> Result<(usize, usize, Vec<usize>)> {
    let bad = |detail: String| Error::Format { kind: "graymap", detail };
    let mut tokens = text.lines().flat_map(|l| l.split('#').next().unwrap_or("").split_whitespace());
    if tokens.next() != Some("P2") {
        return Err(bad("missing P2 magic".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = tokens.next().ok_or_else(|| bad(format!("truncated before {what}")))?;
        t.parse().map_err(|_| bad(format!("{what} {t:?} is not an integer")))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    let values = (0..w * h).map(|_| num("pixel")).collect::<Result<Vec<_>>>()?;
    if let Some(v) = values.iter().find(|&&v| v > max) {
        return Err(bad(format!("pixel {v} exceeds maxval {max}")));
    }
    Ok((w, h, values))
}

pub fn read_panoptic_pgm(text: &str) -> Result<PanopticMap> {
    let (w, h, values) = read_pgm_values(text)?;
    let s = PanopticMap::ID_STRIDE;
    PanopticMap::new(h, w, values.iter().map(|v| v / s).collect(), values.iter().map(|v| v % s).collect())
}

pub fn load_panoptic(path: &Path) -> Result<PanopticMap> {
    read_panoptic_pgm(&std::fs::read_to_string(path)?)
}
