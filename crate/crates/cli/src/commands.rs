//! The pipeline subcommands. Each one stages its outputs in memory, writes
//! them only after every input has been read and validated, and finishes with
//! a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use flowgan_core::codec::{self, FlowMatrix};
use flowgan_core::dynmap::{self, DynamicMap, GridLevels, MapSpecDoc, Rect, RefinementSpec};
use flowgan_core::gravity;
use flowgan_core::metrics::{self, Checksum, EvalItem};
use flowgan_core::mobility::{self, ODDataset, SynthConfig, TimeGroup};
use flowgan_core::model::{
    checkpoint, write_loss_log, ConditionMode, ConditionVocab, ConditionedSample, FlowGan, ModelError,
};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{ConditionKind, ModelKind, RunConfig, Source};
use crate::error::CliError;
use crate::manifest::{write_atomic, Staged};

/// The six demo maps, used when the config lists none.
pub const BUILTIN_MAPS: [(&str, &str); 6] = [
    ("JE", include_str!("../fixtures/maps/JE.toml")),
    ("DT", include_str!("../fixtures/maps/DT.toml")),
    ("PG", include_str!("../fixtures/maps/PG.toml")),
    ("TM0", include_str!("../fixtures/maps/TM0.toml")),
    ("TM1", include_str!("../fixtures/maps/TM1.toml")),
    ("TM2", include_str!("../fixtures/maps/TM2.toml")),
];

/// A loaded config plus the flags that are not config keys.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: RunConfig,
    /// Restricts per-map work to one map.
    pub map: Option<String>,
}

impl Ctx {
    fn run(&self) -> PathBuf {
        self.cfg.run_dir()
    }

    fn dataset(&self) -> PathBuf {
        self.run().join("dataset")
    }

    fn checkpoints(&self) -> PathBuf {
        self.run().join("checkpoints")
    }

    fn reports(&self) -> PathBuf {
        self.run().join("reports")
    }

    fn staged(&self, command: &'static str) -> Staged {
        Staged::new(command, &self.run(), self.cfg.seed(), &self.cfg)
    }

    fn wants(&self, map: &str) -> bool {
        self.map.as_deref().is_none_or(|m| m == map)
    }

    fn trajectories(&self) -> PathBuf {
        self.cfg
            .build
            .trajectories
            .clone()
            .unwrap_or_else(|| self.dataset().join("trajectories.csv"))
    }
}

fn mode_of(kind: ModelKind) -> ConditionMode {
    match kind {
        ModelKind::Conditional => ConditionMode::Conditional,
        ModelKind::Unconditional => ConditionMode::Unconditional,
    }
}

fn mode_name(mode: ConditionMode) -> &'static str {
    match mode {
        ConditionMode::Conditional => "conditional",
        ConditionMode::Unconditional => "unconditional",
    }
}

fn checkpoint_name(mode: ConditionMode) -> &'static str {
    match mode {
        ConditionMode::Conditional => "model.ckpt",
        ConditionMode::Unconditional => "model-uncond.ckpt",
    }
}

/// Condition label of one dataset entry.
pub fn condition_label(kind: ConditionKind, map: &str, group: TimeGroup) -> String {
    match kind {
        ConditionKind::Map => map.to_string(),
        ConditionKind::MapGroup => format!("{map}/G{}", group.id()),
    }
}

fn label_map(label: &str) -> &str {
    label.split('/').next().unwrap_or(label)
}

/// Directory name for a condition label.
pub fn sanitize(label: &str) -> String {
    label.replace('/', "_")
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

struct LoadedMap {
    doc: MapSpecDoc,
    map: DynamicMap,
}

fn load_maps(ctx: &Ctx, st: &mut Staged) -> Result<Vec<LoadedMap>, CliError> {
    let mut sources = Vec::new();
    if ctx.cfg.maps.is_empty() {
        for (name, text) in BUILTIN_MAPS {
            let path = PathBuf::from(format!("builtin/{name}.toml"));
            st.input_bytes(&path, text.as_bytes());
            sources.push((path, text.to_string()));
        }
    } else {
        for p in &ctx.cfg.maps {
            let bytes = st.input(p)?;
            let text = String::from_utf8(bytes).map_err(|_| CliError::Data(format!("{} is not UTF-8", p.display())))?;
            sources.push((p.clone(), text));
        }
    }
    let mut out: Vec<LoadedMap> = Vec::new();
    for (path, text) in sources {
        let doc = dynmap::parse_map_spec(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if !valid_name(&doc.name) {
            return Err(CliError::Data(format!("{}: map name {:?} must be alphanumeric", path.display(), doc.name)));
        }
        if out.iter().any(|m| m.doc.name == doc.name) {
            return Err(CliError::Data(format!("map name {} appears twice", doc.name)));
        }
        let map = doc.build().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        out.push(LoadedMap { doc, map });
    }
    if let Some(m) = &ctx.map {
        if !out.iter().any(|l| &l.doc.name == m) {
            return Err(CliError::Config(format!("no map named {m}")));
        }
    }
    Ok(out)
}

fn union(rects: impl IntoIterator<Item = Rect>) -> Option<Rect> {
    rects.into_iter().reduce(|a, b| {
        let (x0, y0) = (a.min_x.min(b.min_x), a.min_y.min(b.min_y));
        let (x1, y1) = (a.max_x().max(b.max_x()), a.max_y().max(b.max_y()));
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    })
}

/// Uniform grid of `side`-meter zones over `extent`.
pub fn zone_grid(extent: Rect, side: i64) -> Result<DynamicMap, CliError> {
    if extent.width % side != 0 || extent.height % side != 0 {
        return Err(CliError::Config(format!(
            "zone_side_m {side} does not divide the {}x{} m extent",
            extent.width, extent.height
        )));
    }
    let levels = GridLevels {
        coarse: side,
        mid: side / 2,
        fine: side / 4,
    };
    let spec = RefinementSpec {
        name: "zones".into(),
        ..Default::default()
    };
    dynmap::build_map_with_levels(extent, levels, &spec).map_err(|e| CliError::Config(format!("zone grid: {e}")))
}

pub fn cmd_synth(ctx: &Ctx) -> Result<(), CliError> {
    let mut st = ctx.staged("synth");
    let maps = load_maps(ctx, &mut st)?;
    let extent = union(maps.iter().map(|m| m.map.extent())).expect("at least one map");
    let s = &ctx.cfg.synth;
    let zones = zone_grid(extent, s.zone_side_m)?;
    let hotspots: Vec<_> = s.hotspots.iter().map(|h| (h[0], h[1], h[2], h[3])).collect();
    let config = SynthConfig {
        users: s.users,
        days: s.days,
        start_date: s.start_date,
        tz_offset_secs: ctx.cfg.tz_offset_hours * 3600,
        gamma: s.gamma,
        intensities: s.intensities,
        masses: mobility::hotspot_masses(&zones, &hotspots),
    };
    let records = mobility::synth_city(&config, &zones, ctx.cfg.seed()).map_err(|e| CliError::Config(e.to_string()))?;
    let mut csv = Vec::new();
    mobility::write_records(&records, &mut csv)?;
    let trips = mobility::extract_trips(records.iter().cloned(), &zones).trips.len();
    info!("synthesized {} records ({trips} trips) over {} zones", records.len(), zones.len());

    st.summary("records", records.len());
    st.summary("trips", trips);
    st.summary("zones", zones.len());
    st.output(ctx.dataset().join("trajectories.csv"), csv);
    st.commit(&ctx.dataset().join("manifest-synth.json"))?;
    Ok(())
}

/// `dataset/index.json`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub maps: Vec<String>,
    /// Codec scale fitted on the pooled training splits.
    pub scale: f64,
    pub condition: ConditionKind,
    pub first_day: NaiveDate,
    pub last_day: NaiveDate,
}

/// `dataset/<MAP>.meta.json`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapMeta {
    pub name: String,
    pub cells: usize,
    pub trips: u64,
    pub outside_records: usize,
    pub train: Vec<(NaiveDate, TimeGroup)>,
    pub holdout: Vec<(NaiveDate, TimeGroup)>,
}

fn slots(ds: &ODDataset) -> Vec<(NaiveDate, TimeGroup)> {
    ds.entries().map(|(d, g, _)| (d, g)).collect()
}

pub fn cmd_build(ctx: &Ctx) -> Result<(), CliError> {
    let mut st = ctx.staged("build");
    let maps: Vec<LoadedMap> = load_maps(ctx, &mut st)?
        .into_iter()
        .filter(|m| ctx.wants(&m.doc.name))
        .collect();
    let path = ctx.trajectories();
    if !path.is_file() {
        return Err(CliError::Data(format!("{} not found; run `synth` first", path.display())));
    }
    let bytes = st.input(&path)?;
    let (records, malformed) = mobility::read_records(bytes.as_slice())?;
    if malformed > 0 {
        warn!("skipped {malformed} malformed trajectory lines");
    }
    let tz = ctx.cfg.tz_offset_hours * 3600;

    let mut built = Vec::new();
    for m in &maps {
        let ext = mobility::extract_trips(records.iter().cloned(), &m.map);
        let ds = mobility::aggregate(&ext.trips, &m.map, tz);
        built.push((ds, ext.outside));
    }
    let (first, last) = built
        .iter()
        .filter_map(|(ds, _)| ds.date_range())
        .reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)))
        .ok_or_else(|| CliError::Data("no trips fall inside any map".into()))?;

    let mut splits = Vec::new();
    for (k, (ds, _)) in built.iter_mut().enumerate() {
        ds.fill_range(first, last);
        splits.push(mobility::split_dataset(ds, ctx.cfg.build.train_fraction, ctx.cfg.seed().wrapping_add(k as u64))?);
    }
    let scale = codec::fit_scale(splits.iter().flat_map(|(train, _)| train.entries().map(|(_, _, m)| m)));

    let dir = ctx.dataset();
    let mut per_map = BTreeMap::new();
    for ((m, (ds, outside)), (train, holdout)) in maps.iter().zip(&built).zip(&splits) {
        let name = &m.doc.name;
        let mut od = Vec::new();
        ds.write_csv(&mut od)?;
        let meta = MapMeta {
            name: name.clone(),
            cells: m.map.len(),
            trips: ds.total_trips(),
            outside_records: *outside,
            train: slots(train),
            holdout: slots(holdout),
        };
        info!("{name}: {} cells, {} entries, {} trips", meta.cells, ds.len(), meta.trips);
        per_map.insert(name.clone(), ds.len());
        st.output(dir.join(format!("{name}.map.toml")), m.doc.to_text().into_bytes());
        st.output(dir.join(format!("{name}.od.csv")), od);
        st.output(dir.join(format!("{name}.meta.json")), json_bytes(&meta));
    }
    let index = DatasetIndex {
        maps: maps.iter().map(|m| m.doc.name.clone()).collect(),
        scale,
        condition: ctx.cfg.build.condition,
        first_day: first,
        last_day: last,
    };
    st.output(dir.join("index.json"), json_bytes(&index));
    st.summary("entries", per_map.values().sum::<usize>());
    st.summary("entries_per_map", per_map);
    st.summary("scale", scale);
    st.summary("malformed_lines", malformed);
    st.commit(&dir.join("manifest-build.json"))?;
    Ok(())
}

fn json_bytes(v: &impl Serialize) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("json");
    b.push(b'\n');
    b
}

/// A built dataset read back from `dataset/`.
pub struct Built {
    pub index: DatasetIndex,
    pub maps: Vec<BuiltMap>,
}

pub struct BuiltMap {
    pub name: String,
    pub map: DynamicMap,
    pub train: ODDataset,
    pub holdout: ODDataset,
}

impl Built {
    pub fn training_samples(&self) -> Result<Vec<ConditionedSample>, CliError> {
        let mut out = Vec::new();
        for m in &self.maps {
            for (day, group, flow) in m.train.entries() {
                out.push(ConditionedSample {
                    image: codec::encode(flow, self.index.scale)?,
                    condition: condition_label(self.index.condition, &m.name, group),
                    day,
                    group: group.into(),
                });
            }
        }
        Ok(out)
    }
}

fn subset(ds: &ODDataset, keys: &[(NaiveDate, TimeGroup)]) -> Result<ODDataset, CliError> {
    let mut out = ODDataset::new(ds.map_name(), ds.n());
    for &(d, g) in keys {
        let m = ds
            .get(d, g)
            .ok_or_else(|| CliError::Data(format!("{}: split lists missing entry {d} {}", ds.map_name(), g.id())))?;
        out.accumulate(d, g, m)?;
    }
    Ok(out)
}

pub fn load_built(ctx: &Ctx, st: &mut Staged) -> Result<Built, CliError> {
    let dir = ctx.dataset();
    let index_path = dir.join("index.json");
    if !index_path.is_file() {
        return Err(CliError::Data(format!("{} not found; run `build` first", index_path.display())));
    }
    let index: DatasetIndex = serde_json::from_slice(&st.input(&index_path)?)?;
    let mut maps = Vec::new();
    for name in &index.maps {
        if !valid_name(name) {
            return Err(CliError::Data(format!("bad map name {name:?} in index")));
        }
        let spec = st.input(&dir.join(format!("{name}.map.toml")))?;
        let map = dynmap::parse_map_spec(&String::from_utf8_lossy(&spec))?.build()?;
        let meta: MapMeta = serde_json::from_slice(&st.input(&dir.join(format!("{name}.meta.json")))?)?;
        let od = st.input(&dir.join(format!("{name}.od.csv")))?;
        let all_slots: Vec<_> = meta.train.iter().chain(&meta.holdout).copied().collect();
        let ds = ODDataset::read_csv(od.as_slice(), &map, &all_slots)?;
        if ds.len() != all_slots.len() {
            return Err(CliError::Data(format!("{name}: od rows outside the recorded split")));
        }
        maps.push(BuiltMap {
            name: name.clone(),
            train: subset(&ds, &meta.train)?,
            holdout: subset(&ds, &meta.holdout)?,
            map,
        });
    }
    Ok(Built { index, maps })
}

pub fn cmd_train(ctx: &Ctx, mode: ConditionMode) -> Result<(), CliError> {
    let command = match mode {
        ConditionMode::Conditional => "train",
        ConditionMode::Unconditional => "train-uncond",
    };
    let mut st = ctx.staged(command);
    let built = load_built(ctx, &mut st)?;
    let samples = built.training_samples()?;
    let vocab = ConditionVocab::from_samples(&samples)?;
    let cfg = &ctx.cfg.train;
    let mut model = FlowGan::new(vocab, built.index.scale, mode, *cfg, ctx.cfg.seed())?;
    info!(
        "{command}: {} samples, {} conditions, {} parameters",
        samples.len(),
        model.vocab().len(),
        model.param_count()
    );
    let dir = ctx.checkpoints();
    let ckpt = dir.join(checkpoint_name(mode));
    let started = Instant::now();
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        match model.train_epochs(&samples, 1) {
            Ok(l) => {
                let e = &l[0];
                info!("epoch {} d_loss {:.4} g_loss {:.4}", e.epoch, e.d_loss, e.g_loss);
                log.extend(l);
            }
            Err(ModelError::DivergenceDetected { epoch, last_good }) => {
                let path = ckpt.with_extension("last-good.ckpt");
                write_atomic(&path, &checkpoint::to_bytes(&last_good))?;
                warn!("diverged in epoch {epoch}; last good state saved to {}", path.display());
                return Err(ModelError::DivergenceDetected { epoch, last_good }.into());
            }
            Err(e) => return Err(e.into()),
        }
    }
    info!("trained {} epochs in {:.1?}", cfg.epochs, started.elapsed());
    let mut loss = Vec::new();
    write_loss_log(&log, &mut loss).map_err(|e| CliError::io(&dir, e))?;
    let stem = checkpoint_name(mode).trim_end_matches(".ckpt").replace("model", "loss");
    st.summary("samples", samples.len());
    st.summary("conditions", model.vocab().labels());
    st.summary("epochs", log.len());
    if let Some(last) = log.last() {
        st.summary("final_d_loss", last.d_loss);
        st.summary("final_g_loss", last.g_loss);
    }
    st.output(ckpt, checkpoint::to_bytes(&model));
    st.output(dir.join(format!("{stem}.csv")), loss);
    st.commit(&dir.join(format!("manifest-{command}.json")))?;
    Ok(())
}

/// Sparse `origin,dest,count` rows of the nonzero entries.
pub fn flow_csv(flow: &FlowMatrix) -> Vec<u8> {
    let mut s = String::from("origin,dest,count\n");
    let n = flow.n();
    for i in 0..n {
        for j in 0..n {
            let c = flow.get(i, j);
            if c > 0 {
                writeln!(s, "{i},{j},{c}").expect("string write");
            }
        }
    }
    s.into_bytes()
}

pub fn read_flow_csv(bytes: &[u8], n: usize) -> Result<FlowMatrix, CliError> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let mut flow = FlowMatrix::zeros(n);
    for row in rdr.deserialize::<(usize, usize, u64)>() {
        let (i, j, c) = row?;
        if i >= n || j >= n || i == j {
            return Err(CliError::Data(format!("cell pair ({i}, {j}) invalid for {n} cells")));
        }
        flow.add(i, j, c);
    }
    Ok(flow)
}

/// Latent seed for the `k`-th condition of a run seeded with `seed`.
fn condition_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn cmd_generate(ctx: &Ctx, kind: ModelKind) -> Result<(), CliError> {
    let mode = mode_of(kind);
    let count = ctx.cfg.generate.count;
    let mut st = ctx.staged("generate");
    let path = ctx.checkpoints().join(checkpoint_name(mode));
    if !path.is_file() {
        return Err(CliError::Data(format!("{} not found; train first", path.display())));
    }
    let model = checkpoint::from_bytes(&st.input(&path)?)?;
    if model.mode() != mode {
        return Err(ModelError::ModeMismatch {
            expected: mode,
            found: model.mode(),
        }
        .into());
    }
    let labels: Vec<String> = match &ctx.cfg.generate.condition {
        Some(c) => {
            if model.vocab().index_of(c).is_none() {
                return Err(ModelError::UnknownCondition(c.clone()).into());
            }
            vec![c.clone()]
        }
        None => model
            .vocab()
            .labels()
            .iter()
            .filter(|l| ctx.wants(label_map(l)))
            .cloned()
            .collect(),
    };
    if labels.is_empty() {
        return Err(CliError::Config("no condition matches --map".into()));
    }
    if count == 0 {
        info!("count is 0; nothing to generate");
        return Ok(());
    }

    let root = ctx.run().join("generated").join(mode_name(mode));
    let started = Instant::now();
    let mut dirs = Vec::new();
    let mut trips = BTreeMap::new();
    for label in &labels {
        let k = model.vocab().index_of(label).expect("checked");
        let images = model.generate_batch(label, count, condition_seed(ctx.cfg.seed(), k))?;
        let dir = root.join(sanitize(label));
        let mut total = 0;
        for (i, img) in images.iter().enumerate() {
            let flow = codec::decode(img);
            debug_assert!((0..flow.n()).all(|d| flow.get(d, d) == 0));
            total += flow.total();
            st.output(dir.join(format!("sample_{i:04}.csv")), flow_csv(&flow));
            st.output(dir.join(format!("sample_{i:04}.pgm")), codec::to_pgm(img));
        }
        trips.insert(label.clone(), total);
        dirs.push(dir);
    }
    info!("generated {} samples in {:.2?}", count * labels.len(), started.elapsed());
    // Drop samples left over from an earlier, larger run.
    for dir in &dirs {
        if dir.is_dir() {
            std::fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    st.summary("count", count);
    st.summary("trips_per_condition", trips);
    let tag = match &ctx.cfg.generate.condition {
        Some(c) => sanitize(c),
        None => ctx.map.clone().unwrap_or_else(|| "all".into()),
    };
    st.commit(&root.join(format!("manifest-{tag}.json")))?;
    Ok(())
}

pub fn cmd_gravity(ctx: &Ctx) -> Result<(), CliError> {
    let mut st = ctx.staged("gravity");
    let built = load_built(ctx, &mut st)?;
    let dir = ctx.reports().join("gravity");
    let mut fitted = BTreeMap::new();
    for m in built.maps.iter().filter(|m| ctx.wants(&m.name)) {
        let masses = gravity::derive_masses(&m.train)?;
        let params = gravity::fit(&m.train, &m.map, &masses)?;
        let pooled = gravity::predict(&params, &masses, &m.map)?;
        // Fitted on the pooled split; scale back to one (day, group) entry.
        let per_entry = m.train.len() as f64;
        let n = pooled.n;
        let counts = pooled.values.iter().map(|v| (v / per_entry).round() as u64).collect();
        let flow = FlowMatrix::new(n, counts)?;
        info!(
            "{}: G {:.4e} alpha {:.3} beta {:.3} gamma {:.3}",
            m.name, params.g, params.alpha, params.beta, params.gamma
        );
        let mut p = Vec::new();
        gravity::write_params(&params, &format!("{}/train", m.name), &mut p)?;
        st.output(dir.join(format!("{}.params.csv", m.name)), p);
        st.output(dir.join(format!("{}.predicted.csv", m.name)), flow_csv(&flow));
        fitted.insert(m.name.clone(), params);
    }
    st.summary("params", fitted);
    st.commit(&dir.join("manifest.json"))?;
    Ok(())
}

fn sample_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_name().is_some_and(|f| f.to_string_lossy().starts_with("sample_"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn cmd_evaluate(ctx: &Ctx) -> Result<(), CliError> {
    let mut st = ctx.staged("evaluate");
    let built = load_built(ctx, &mut st)?;
    let kind = built.index.condition;

    // Ground truth: the holdout entries, grouped by (map, condition) in key order.
    let mut ground: Vec<(String, String, FlowMatrix)> = Vec::new();
    let mut needed: BTreeMap<(String, String), usize> = BTreeMap::new();
    for m in built.maps.iter().filter(|m| ctx.wants(&m.name)) {
        for (_, group, flow) in m.holdout.entries() {
            let label = condition_label(kind, &m.name, group);
            *needed.entry((m.name.clone(), label.clone())).or_default() += 1;
            ground.push((m.name.clone(), label, flow.clone()));
        }
    }
    if ground.is_empty() {
        return Err(CliError::Data("no holdout entries to evaluate against".into()));
    }
    let cells: BTreeMap<&str, usize> = built.maps.iter().map(|m| (m.name.as_str(), m.map.len())).collect();

    let sources: BTreeSet<Source> = ctx.cfg.evaluate.sources.iter().copied().collect();
    let mut generated: Vec<(Source, Vec<(String, String, FlowMatrix)>)> = Vec::new();
    for &source in &sources {
        let mut items = Vec::new();
        for ((map, label), &h) in &needed {
            let n = cells[map.as_str()];
            let flows: Vec<FlowMatrix> = match source {
                Source::Gravity => {
                    let p = ctx.reports().join("gravity").join(format!("{map}.predicted.csv"));
                    if !p.is_file() {
                        return Err(CliError::Data(format!("{} not found; run `gravity` first", p.display())));
                    }
                    let flow = read_flow_csv(&st.input(&p)?, n)?;
                    vec![flow; h]
                }
                Source::Conditional | Source::Unconditional => {
                    let dir = ctx.run().join("generated").join(source.name()).join(sanitize(label));
                    let files = if dir.is_dir() { sample_files(&dir)? } else { Vec::new() };
                    if files.len() < h {
                        return Err(CliError::Data(format!(
                            "{}: {} samples for {h} holdout entries; run `generate` with --count {h} or more",
                            dir.display(),
                            files.len()
                        )));
                    }
                    files[..h]
                        .iter()
                        .map(|f| read_flow_csv(&st.input(f)?, n))
                        .collect::<Result<_, _>>()?
                }
            };
            items.extend(flows.into_iter().map(|f| (map.clone(), label.clone(), f)));
        }
        generated.push((source, items));
    }

    // Holdout and baseline flows may exceed the training scale, so images
    // for PSNR and SSIM use one scale fitted over everything compared.
    let scale = codec::fit_scale(
        ground
            .iter()
            .chain(generated.iter().flat_map(|(_, g)| g))
            .map(|(_, _, f)| f),
    )
    .max(built.index.scale);
    let items = |v: &[(String, String, FlowMatrix)]| -> Result<Vec<EvalItem>, CliError> {
        v.iter()
            .map(|(m, l, f)| Ok(EvalItem::from_flow(m, l, f.clone(), scale)?))
            .collect()
    };
    let ground = items(&ground)?;

    let dir = ctx.reports().join("evaluate");
    let mut checksums: Vec<(&str, Checksum)> = Vec::new();
    for (source, gen) in &generated {
        let report = metrics::evaluate_run(&items(gen)?, &ground)?;
        info!(
            "{}: mean CPC {:.4}, mean SSIM {:.4}",
            source.name(),
            report.average.mean_cpc,
            report.average.mean_ssim
        );
        if checksums.is_empty() {
            checksums.push(("ground", report.ground_checksum));
        }
        checksums.push((source.name(), report.generated_checksum));
        let (mut samples, mut summary) = (Vec::new(), Vec::new());
        report.write_samples_csv(&mut samples)?;
        report.write_summary_csv(&mut summary)?;
        st.output(dir.join(source.name()).join("samples.csv"), samples);
        st.output(dir.join(source.name()).join("summary.csv"), summary);
        st.summary(&format!("{}_mean_cpc", source.name()), report.average.mean_cpc);
    }
    if checksums.is_empty() {
        let flows: Vec<_> = ground.iter().map(|g| g.flow.clone()).collect();
        checksums.push(("ground", metrics::checksum(&flows)?));
    }
    let mut cs = Vec::new();
    metrics::write_checksum_csv(&checksums, &mut cs)?;
    st.output(dir.join("checksum.csv"), cs);
    st.summary("holdout_entries", ground.len());
    st.summary("image_scale", scale);
    st.commit(&dir.join("manifest.json"))?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct SummaryRow {
    map: String,
    mean_cpc: f64,
    mean_ssim: f64,
    median_psnr: f64,
}

#[derive(Debug, Deserialize)]
struct ChecksumRow {
    source: String,
    max: f64,
    avg: f64,
}

/// Markdown tables from the evaluation CSVs.
pub fn cmd_report(ctx: &Ctx) -> Result<(), CliError> {
    let mut st = ctx.staged("report");
    let dir = ctx.reports().join("evaluate");
    let cs_path = dir.join("checksum.csv");
    if !cs_path.is_file() {
        return Err(CliError::Data(format!("{} not found; run `evaluate` first", cs_path.display())));
    }
    let checks: Vec<ChecksumRow> = csv::Reader::from_reader(st.input(&cs_path)?.as_slice())
        .deserialize()
        .collect::<Result<_, _>>()?;
    let mut summaries: Vec<(String, Vec<SummaryRow>)> = Vec::new();
    for row in checks.iter().filter(|r| r.source != "ground") {
        let p = dir.join(&row.source).join("summary.csv");
        let rows = csv::Reader::from_reader(st.input(&p)?.as_slice())
            .deserialize()
            .collect::<Result<_, _>>()?;
        summaries.push((row.source.clone(), rows));
    }

    let mut md = format!("# Run `{}`\n\n## Checksums\n\n| source | MAX | AVG |\n|---|---:|---:|\n", ctx.cfg.run_id);
    for r in &checks {
        writeln!(md, "| {} | {} | {:.4} |", r.source, r.max, r.avg).expect("string write");
    }
    if let Some((_, first)) = summaries.first() {
        let metrics: [(&str, fn(&SummaryRow) -> f64, usize); 3] = [
            ("Mean CPC", |r| r.mean_cpc, 4),
            ("Mean SSIM", |r| r.mean_ssim, 4),
            ("Median PSNR (dB)", |r| r.median_psnr, 2),
        ];
        for (title, get, prec) in metrics {
            write!(md, "\n## {title}\n\n| map |").expect("string write");
            for (s, _) in &summaries {
                write!(md, " {s} |").expect("string write");
            }
            md.push_str("\n|---|");
            md.push_str(&"---:|".repeat(summaries.len()));
            md.push('\n');
            for (k, row) in first.iter().enumerate() {
                write!(md, "| {} |", row.map).expect("string write");
                for (_, rows) in &summaries {
                    match rows.get(k) {
                        Some(r) => write!(md, " {:.*} |", prec, get(r)),
                        None => write!(md, " - |"),
                    }
                    .expect("string write");
                }
                md.push('\n');
            }
        }
    }
    let out = ctx.reports().join("report.md");
    st.output(out, md.into_bytes());
    st.commit(&ctx.reports().join("manifest-report.json"))?;
    Ok(())
}
