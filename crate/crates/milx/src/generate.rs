//! `milx generate`: synthesise a dataset, split it and write it out.

use std::path::PathBuf;

use milx_core::bagdata::{generate_shard, stratified_split, Bag, Dataset, SplitTag};
use rayon::prelude::*;

use crate::context::Context;
use crate::dataset_io;
use crate::error::Result;
use crate::outdir::Staged;

const SHARD: usize = 16;

/// Generates every bag (in parallel shards; the result does not depend on
/// the shard layout) and tags it with its stratified split.
pub fn build(ctx: &Context) -> Result<Vec<(Bag, SplitTag)>> {
    let synth = &ctx.config.synth;
    synth.validate()?;
    let shards: Vec<_> = (0..synth.num_bags.div_ceil(SHARD)).map(|s| s * SHARD..((s + 1) * SHARD).min(synth.num_bags)).collect();
    let parts = shards.into_par_iter().map(|r| generate_shard(synth, r)).collect::<milx_core::Result<Vec<_>>>()?;
    let bags: Vec<Bag> = parts.into_iter().flat_map(|d| d.bags).collect();
    let data = Dataset::new(bags, synth.num_classes, SplitTag::Unsplit)?;
    let (train, val, test) = stratified_split(&data, ctx.config.split.ratios, ctx.config.split.seed)?;
    let mut tagged: Vec<(Bag, SplitTag)> = [(train, SplitTag::Train), (val, SplitTag::Val), (test, SplitTag::Test)]
        .into_iter()
        .flat_map(|(d, t)| d.bags.into_iter().map(move |b| (b, t)))
        .collect();
    tagged.sort_by(|a, b| a.0.bag_id.cmp(&b.0.bag_id));
    Ok(tagged)
}

pub fn run(ctx: &Context) -> Result<PathBuf> {
    let target = match &ctx.options.out {
        Some(o) => o.clone(),
        None => ctx.loaded.resolve(&ctx.loaded.require_path("dataset", &ctx.config.paths.dataset)?),
    };
    let stage = Staged::begin(&target, ctx.options.force)?;
    let tagged = build(ctx)?;
    dataset_io::write_dataset(stage.path(), &tagged, ctx.config.synth.num_classes, &ctx.provenance(""))?;
    let out = stage.commit()?;
    let count = |t: SplitTag| tagged.iter().filter(|(_, s)| *s == t).count();
    println!(
        "generated {} bags ({} train, {} val, {} test) in {}",
        tagged.len(),
        count(SplitTag::Train),
        count(SplitTag::Val),
        count(SplitTag::Test),
        out.display()
    );
    Ok(out)
}
