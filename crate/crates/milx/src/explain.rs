//! `milx explain`: attribution maps and overlays for selected bags.
//!
//! ```text
//! <out>/attributions/<method>/<bag_id>.safetensors
//! <out>/overlays/<method>/<bag_id>/<index>.png
//! <out>/failures.tsv                               only when a bag failed
//! ```
//!
//! Maps explain the bag's true class. A failing (method, bag) pair is
//! reported and the rest of the batch continues.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use milx_core::attributions::{explain, AttributionResult};
use milx_core::bagdata::Bag;
use rayon::prelude::*;

use crate::attribution_io;
use crate::checkpoint;
use crate::context::{calibrated_configs, create_dir, parse_methods, select, Context};
use crate::dataset_io::write_png;
use crate::digest::Provenance;
use crate::error::{Error, Result};
use crate::outdir::Staged;
use crate::render;

/// Writes one overlay PNG per instance into `dir`.
pub fn render_overlays(result: &AttributionResult, bag: &Bag, scale: usize, provenance: &Provenance, dir: &Path) -> Result<()> {
    result.check_alignment(bag)?;
    create_dir(dir)?;
    for (k, (inst, map)) in bag.instances.iter().zip(&result.maps).enumerate() {
        let rgb = render::overlay(&inst.pixels, map, result.signed, scale)?;
        let path = dir.join(format!("{k:03}.png"));
        write_png(&path, inst.width() * scale.max(1), inst.height() * scale.max(1), png::ColorType::Rgb, &rgb, provenance)?;
    }
    Ok(())
}

/// Re-renders the overlays of a stored result file.
pub fn render_file(path: &Path, bag: &Bag, scale: usize, dir: &Path) -> Result<()> {
    let (meta, result) = attribution_io::read(path)?;
    render_overlays(&result, bag, scale, &meta.provenance, dir)
}

pub struct Summary {
    pub out: PathBuf,
    pub written: usize,
    pub failures: Vec<(String, String, String)>,
}

pub fn run(ctx: &Context) -> Result<Summary> {
    let ckpt = checkpoint::load(&ctx.checkpoint_path()?)?;
    checkpoint::check_architecture(&ckpt, &ctx.config.model)?;
    let data = ctx.dataset()?;
    let section = &ctx.config.explain;
    let bags = select(&data, &section.selection())?;
    let methods = parse_methods(&section.methods)?;
    let stage = Staged::begin(&ctx.out_dir("explain")?, ctx.options.force)?;
    let provenance = ctx.provenance(&ckpt.digest);
    let configs = calibrated_configs(ctx, &ckpt.model, &data, &methods)?;

    let mut written = 0;
    let mut failures = Vec::new();
    for (method, cfg) in &configs {
        let adir = stage.path().join("attributions").join(method.as_str());
        create_dir(&adir)?;
        let outcomes: Vec<Result<()>> = bags
            .par_iter()
            .map(|bag| {
                let result = explain(&ckpt.model, bag, bag.label, *method, cfg)?;
                let ids: Vec<String> = bag.instances.iter().map(|i| i.instance_id.clone()).collect();
                attribution_io::write(&adir.join(format!("{}.safetensors", bag.bag_id)), &result, &ids, &provenance)?;
                let odir = stage.path().join("overlays").join(method.as_str()).join(&bag.bag_id);
                render_overlays(&result, bag, section.scale, &provenance, &odir)
            })
            .collect();
        for (bag, outcome) in bags.iter().zip(outcomes) {
            match outcome {
                Ok(()) => written += 1,
                Err(e) => {
                    eprintln!("explain: {method} failed on {}: {e}", bag.bag_id);
                    failures.push((method.to_string(), bag.bag_id.clone(), e.to_string()));
                }
            }
        }
    }
    if !failures.is_empty() {
        let mut t = String::from("method\tbag_id\terror\n");
        for (m, b, e) in &failures {
            writeln!(t, "{m}\t{b}\t{}", e.replace(['\t', '\n'], " ")).unwrap();
        }
        let path = stage.path().join("failures.tsv");
        std::fs::write(&path, t).map_err(|e| Error::io(&path, e))?;
    }
    if written == 0 && !failures.is_empty() {
        return Err(Error::Runtime(format!("every attribution failed ({} failures)", failures.len())));
    }
    let out = stage.commit()?;
    println!("wrote {written} attribution files to {} ({} failures)", out.display(), failures.len());
    Ok(Summary { out, written, failures })
}
