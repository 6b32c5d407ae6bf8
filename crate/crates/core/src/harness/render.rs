//! Plain-text portable pixmaps and graymaps of forecast outputs.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::persist::write_panoptic_pgm;
use super::pipeline::{Model, SceneForecast};
use super::scene::SceneSequence;
use crate::error::Result;
use crate::refine::PanopticMap;

/// Colours of background classes, indexed by class.
pub const STUFF_COLORS: [[u8; 3]; 3] = [[128, 64, 128], [70, 70, 70], [70, 130, 180]];

/// Colours of instances, indexed by `instance id mod 12`.
pub const INSTANCE_COLORS: [[u8; 3]; 12] = [
    [220, 20, 60],
    [0, 0, 142],
    [255, 165, 0],
    [0, 128, 0],
    [148, 0, 211],
    [0, 206, 209],
    [255, 215, 0],
    [139, 69, 19],
    [255, 105, 180],
    [47, 79, 79],
    [154, 205, 50],
    [106, 90, 205],
];

pub fn color(class: usize, instance: usize) -> [u8; 3] {
    if instance == 0 {
        STUFF_COLORS[class % STUFF_COLORS.len()]
    } else {
        INSTANCE_COLORS[instance % INSTANCE_COLORS.len()]
    }
}

pub fn write_panoptic_ppm<W: Write>(map: &PanopticMap, mut out: W) -> Result<()> {
    writeln!(out, "P3\n{} {}\n255", map.width, map.height)?;
    for r in 0..map.height {
        let line: Vec<String> = (0..map.width)
            .map(|c| {
                let (cl, inst) = map.get(r, c);
                let [a, b, d] = color(cl, inst);
                format!("{a} {b} {d}")
            })
            .collect();
        writeln!(out, "{}", line.join("  "))?;
    }
    Ok(())
}

pub fn write_pgm<W: Write>(values: &[usize], height: usize, width: usize, max: usize, mut out: W) -> Result<()> {
    writeln!(out, "P2\n{width} {height}\n{}", max.max(1))?;
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(usize::to_string).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Depth quantized to `0..=255` over `[0, max_depth]`.
pub fn depth_levels(depth: &[f64], max_depth: f64) -> Vec<usize> {
    depth
        .iter()
        .map(|&d| ((d.clamp(0.0, max_depth) / max_depth) * 255.0).round() as usize)
        .collect()
}

/// Files written by [`render_forecast`].
#[derive(Debug, Clone)]
pub struct Rendered {
    pub files: Vec<PathBuf>,
    pub forecast: SceneForecast,
}

pub const MAX_RENDER_DEPTH: f64 = 60.0;

/// Runs the full pipeline on `scene` and writes `panoptic.ppm`,
/// `panoptic.pgm`, `selection.pgm`, `depth.pgm` and `forecasts.csv` into
/// `out_dir`.
pub fn render_forecast(model: &Model, scene: &SceneSequence, out_dir: &Path) -> Result<Rendered> {
    let f = model.forecast(scene)?;
    std::fs::create_dir_all(out_dir)?;
    let (h, w) = (scene.height, scene.width);
    let path = |name: &str| out_dir.join(name);
    let mut files = Vec::new();

    let p = path("panoptic.ppm");
    let mut buf = Vec::new();
    write_panoptic_ppm(&f.refined.panoptic, &mut buf)?;
    std::fs::write(&p, buf)?;
    files.push(p);

    let p = path("panoptic.pgm");
    let mut buf = Vec::new();
    write_panoptic_pgm(&f.refined.panoptic, &mut buf)?;
    std::fs::write(&p, buf)?;
    files.push(p);

    let p = path("selection.pgm");
    let mut buf = Vec::new();
    write_pgm(&f.refined.selection.argmax, h, w, scene.agents.len(), &mut buf)?;
    std::fs::write(&p, buf)?;
    files.push(p);

    let p = path("depth.pgm");
    let mut buf = Vec::new();
    write_pgm(&depth_levels(f.refined.depth.depth.data(), MAX_RENDER_DEPTH), h, w, 255, &mut buf)?;
    std::fs::write(&p, buf)?;
    files.push(p);

    let p = path("forecasts.csv");
    let mut wtr = csv::Writer::from_path(&p)?;
    wtr.write_record(["agent", "id", "step", "frame", "x0", "y0", "x1", "y1", "depth", "presence"])?;
    for t in &f.tracks {
        for j in 0..scene.horizon {
            let b = t.boxes.row(j);
            let mut rec = vec![t.agent.to_string(), t.id.to_string(), j.to_string(), (scene.t_in + j).to_string()];
            rec.extend(b.iter().map(f64::to_string));
            rec.push(t.presence[j].to_string());
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    files.push(p);

    Ok(Rendered { files, forecast: f })
}
