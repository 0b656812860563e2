//! Flow comparison metrics: checksum, PSNR, SSIM and CPC, plus per-map
//! report assembly.

use std::collections::BTreeMap;
use std::io::Write;

use thiserror::Error;

use crate::codec::{decode, encode, CodecError, FlowImage, FlowMatrix, IMAGE_SIDE};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image is {0}×{1}, smaller than the 11×11 window")]
    ImageTooSmall(usize, usize),
    #[error("corpora are misaligned: {0}")]
    CorpusMisaligned(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Pixel data range of normalized images.
pub const DATA_RANGE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Checksum {
    pub max: f64,
    pub avg: f64,
}

/// Largest entry and mean over all active `n × n` entries (diagonal
/// included, padding excluded) of every matrix.
pub fn checksum(corpus: &[FlowMatrix]) -> Result<Checksum> {
    if corpus.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let max = corpus.iter().map(FlowMatrix::max).max().unwrap_or(0);
    let total: u64 = corpus.iter().map(FlowMatrix::total).sum();
    let cells: usize = corpus.iter().map(|m| m.n() * m.n()).sum();
    let avg = if cells == 0 { 0.0 } else { total as f64 / cells as f64 };
    Ok(Checksum { max: max as f64, avg })
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr_pixels(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricError::ShapeMismatch(format!("{} vs {} pixels", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DATA_RANGE * DATA_RANGE / mse).log10())
}

/// PSNR over the full 64×64 frame.
pub fn psnr(a: &FlowImage, b: &FlowImage) -> Result<f64> {
    psnr_pixels(a.pixels(), b.pixels())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Valid-region separable Gaussian filter of a row-major `h × w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|t| k[t] * img[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|t| k[t] * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity of two row-major `h × w` images with an
/// 11×11 Gaussian window (σ = 1.5) over valid windows only.
pub fn ssim_pixels(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(MetricError::ShapeMismatch(format!(
            "{} and {} pixels for a {h}×{w} image",
            a.len(),
            b.len()
        )));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::ImageTooSmall(h, w));
    }
    let k = gaussian_kernel();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let e_aa = filter_valid(&prod(a, a), h, w, &k);
    let e_bb = filter_valid(&prod(b, b), h, w, &k);
    let e_ab = filter_valid(&prod(a, b), h, w, &k);
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        total += ssim_local(mu_a[i], mu_b[i], e_aa[i], e_bb[i], e_ab[i], c1, c2);
    }
    Ok(total / mu_a.len() as f64)
}

fn ssim_local(ma: f64, mb: f64, eaa: f64, ebb: f64, eab: f64, c1: f64, c2: f64) -> f64 {
    let va = eaa - ma * ma;
    let vb = ebb - mb * mb;
    let cov = eab - ma * mb;
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

pub fn ssim(a: &FlowImage, b: &FlowImage) -> Result<f64> {
    ssim_pixels(a.pixels(), b.pixels(), IMAGE_SIDE, IMAGE_SIDE)
}

/// Common part of commuters on real-valued flows:
/// `2 Σ min(g, r) / (Σ g + Σ r)`, and 1 when both are all zero.
pub fn cpc_values(gen: &[f64], real: &[f64]) -> Result<f64> {
    if gen.len() != real.len() {
        return Err(MetricError::ShapeMismatch(format!("{} vs {} entries", gen.len(), real.len())));
    }
    let common: f64 = gen.iter().zip(real).map(|(g, r)| g.min(*r)).sum();
    let total: f64 = gen.iter().sum::<f64>() + real.iter().sum::<f64>();
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * common / total)
}

pub fn cpc(gen: &FlowMatrix, real: &FlowMatrix) -> Result<f64> {
    if gen.n() != real.n() {
        return Err(MetricError::ShapeMismatch(format!("{} vs {} cells", gen.n(), real.n())));
    }
    // Exact integer sums; counts stay far below 2^53 after conversion.
    let common: u64 = gen.counts().iter().zip(real.counts()).map(|(g, r)| (*g).min(*r)).sum();
    let total = gen.total() + real.total();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * common as f64 / total as f64)
}

/// One flow sample with both its count and image form.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub map: String,
    pub condition: String,
    pub flow: FlowMatrix,
    pub image: FlowImage,
}

impl EvalItem {
    /// From a generated image; counts are its decoding.
    pub fn from_image(map: &str, condition: &str, image: FlowImage) -> Self {
        EvalItem {
            map: map.into(),
            condition: condition.into(),
            flow: decode(&image),
            image,
        }
    }

    /// From observed counts; the image is its encoding at `scale`.
    pub fn from_flow(map: &str, condition: &str, flow: FlowMatrix, scale: f64) -> Result<Self> {
        Ok(EvalItem {
            map: map.into(),
            condition: condition.into(),
            image: encode(&flow, scale)?,
            flow,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub map: String,
    pub condition: String,
    pub sample_id: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub cpc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapSummary {
    pub map: String,
    pub mean_cpc: f64,
    pub mean_ssim: f64,
    pub median_psnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    /// Per-map rows in map order.
    pub maps: Vec<MapSummary>,
    /// Unweighted mean of the per-map rows (median PSNR: median of the
    /// per-map medians).
    pub average: MapSummary,
    pub generated_checksum: Checksum,
    pub ground_checksum: Checksum,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Median with `+inf` sorting last.
fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

/// Compares the k-th generated sample of every (map, condition) group with
/// the k-th ground-truth sample of the same group.
pub fn evaluate_run(generated: &[EvalItem], ground: &[EvalItem]) -> Result<MetricReport> {
    if generated.is_empty() || ground.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let group = |items: &[EvalItem]| {
        let mut g: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
        for (i, it) in items.iter().enumerate() {
            g.entry((it.map.clone(), it.condition.clone())).or_default().push(i);
        }
        g
    };
    let gen_groups = group(generated);
    let real_groups = group(ground);
    if gen_groups.keys().ne(real_groups.keys()) {
        return Err(MetricError::CorpusMisaligned(format!(
            "groups {:?} vs {:?}",
            gen_groups.keys().collect::<Vec<_>>(),
            real_groups.keys().collect::<Vec<_>>()
        )));
    }

    let mut samples = Vec::new();
    for ((map, condition), gi) in &gen_groups {
        let ri = &real_groups[&(map.clone(), condition.clone())];
        if gi.len() != ri.len() {
            return Err(MetricError::CorpusMisaligned(format!(
                "{map}/{condition}: {} generated vs {} ground samples",
                gi.len(),
                ri.len()
            )));
        }
        for (k, (&a, &b)) in gi.iter().zip(ri).enumerate() {
            let (g, r) = (&generated[a], &ground[b]);
            samples.push(SampleMetrics {
                map: map.clone(),
                condition: condition.clone(),
                sample_id: k,
                psnr_db: psnr(&g.image, &r.image)?,
                ssim: ssim(&g.image, &r.image)?,
                cpc: cpc(&g.flow, &r.flow)?,
            });
        }
    }

    let mut by_map: BTreeMap<&str, Vec<&SampleMetrics>> = BTreeMap::new();
    for s in &samples {
        by_map.entry(&s.map).or_default().push(s);
    }
    let maps: Vec<MapSummary> = by_map
        .iter()
        .map(|(map, rows)| {
            let col = |f: fn(&SampleMetrics) -> f64| rows.iter().map(|s| f(s)).collect::<Vec<_>>();
            MapSummary {
                map: map.to_string(),
                mean_cpc: mean(&col(|s| s.cpc)),
                mean_ssim: mean(&col(|s| s.ssim)),
                median_psnr: median(&col(|s| s.psnr_db)),
            }
        })
        .collect();
    let col = |f: fn(&MapSummary) -> f64| maps.iter().map(f).collect::<Vec<_>>();
    let average = MapSummary {
        map: "Average".into(),
        mean_cpc: mean(&col(|m| m.mean_cpc)),
        mean_ssim: mean(&col(|m| m.mean_ssim)),
        median_psnr: median(&col(|m| m.median_psnr)),
    };
    let flows = |items: &[EvalItem]| items.iter().map(|i| i.flow.clone()).collect::<Vec<_>>();
    Ok(MetricReport {
        samples,
        maps,
        average,
        generated_checksum: checksum(&flows(generated))?,
        ground_checksum: checksum(&flows(ground))?,
    })
}

impl MetricReport {
    /// `map,condition,sample_id,psnr_db,ssim,cpc`
    pub fn write_samples_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["map", "condition", "sample_id", "psnr_db", "ssim", "cpc"])?;
        for s in &self.samples {
            w.write_record([
                s.map.clone(),
                s.condition.clone(),
                s.sample_id.to_string(),
                s.psnr_db.to_string(),
                s.ssim.to_string(),
                s.cpc.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `map,mean_cpc,mean_ssim,median_psnr`, one row per map then `Average`.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["map", "mean_cpc", "mean_ssim", "median_psnr"])?;
        for m in self.maps.iter().chain(std::iter::once(&self.average)) {
            w.write_record([
                m.map.clone(),
                m.mean_cpc.to_string(),
                m.mean_ssim.to_string(),
                m.median_psnr.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `source,max,avg`
pub fn write_checksum_csv<W: Write>(rows: &[(&str, Checksum)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["source", "max", "avg"])?;
    for (source, c) in rows {
        w.write_record([source.to_string(), c.max.to_string(), c.avg.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[u64]]) -> FlowMatrix {
        FlowMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn checksum_examples() {
        let c = checksum(&[m(&[&[0, 3], &[1, 0]])]).unwrap();
        assert_eq!((c.max, c.avg), (3.0, 1.0));
        let z = checksum(&[FlowMatrix::zeros(4)]).unwrap();
        assert_eq!((z.max, z.avg), (0.0, 0.0));
        assert!(matches!(checksum(&[]), Err(MetricError::EmptyCorpus)));
    }

    #[test]
    fn psnr_examples() {
        let zeros = vec![0.0; 16];
        assert_eq!(psnr_pixels(&zeros, &zeros).unwrap(), f64::INFINITY);
        assert_eq!(psnr_pixels(&zeros, &[1.0; 16]).unwrap(), 0.0);
        let p = psnr_pixels(&zeros, &[0.1; 16]).unwrap();
        assert!((p - 20.0).abs() < 1e-12);
        assert!(psnr_pixels(&zeros, &[0.0; 4]).is_err());
    }

    #[test]
    fn ssim_examples() {
        let (h, w) = (16, 16);
        let a: Vec<f64> = (0..h * w).map(|i| if (i / w + i % w) % 3 == 0 { 0.95 } else { 0.05 }).collect();
        assert_eq!(ssim_pixels(&a, &a, h, w).unwrap(), 1.0);
        let inv: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        assert!(ssim_pixels(&a, &inv, h, w).unwrap() < 0.0);
        assert!(matches!(
            ssim_pixels(&[0.0; 64], &[0.0; 64], 8, 8),
            Err(MetricError::ImageTooSmall(8, 8))
        ));
    }

    #[test]
    fn cpc_examples() {
        let g = m(&[&[0, 2], &[0, 0]]);
        let r = m(&[&[0, 1], &[1, 0]]);
        assert_eq!(cpc(&g, &r).unwrap(), 0.5);
        assert_eq!(cpc(&r, &r).unwrap(), 1.0);
        assert_eq!(cpc(&g, &m(&[&[0, 0], &[5, 0]])).unwrap(), 0.0);
        assert_eq!(cpc(&FlowMatrix::zeros(3), &FlowMatrix::zeros(3)).unwrap(), 1.0);
        assert!(cpc(&g, &FlowMatrix::zeros(3)).is_err());
    }

    fn item(map: &str, cond: &str, seed: u64) -> EvalItem {
        let mut f = FlowMatrix::zeros(5);
        f.add((seed % 5) as usize, ((seed + 1) % 5) as usize, 3 + seed);
        f.add(1, 2, 7);
        EvalItem::from_flow(map, cond, f, 4.0).unwrap()
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let corpus: Vec<EvalItem> = ["JE", "DT"]
            .iter()
            .flat_map(|m| (0..3).map(move |k| item(m, m, k)))
            .collect();
        let r = evaluate_run(&corpus, &corpus).unwrap();
        assert_eq!(r.samples.len(), 6);
        assert!(r.samples.iter().all(|s| s.cpc == 1.0 && s.ssim == 1.0 && s.psnr_db == f64::INFINITY));
        assert_eq!(r.maps.iter().map(|m| m.map.as_str()).collect::<Vec<_>>(), ["DT", "JE"]);
        assert_eq!(r.average.mean_cpc, 1.0);
        assert_eq!(r.generated_checksum, r.ground_checksum);

        let mut buf = Vec::new();
        r.write_summary_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "map,mean_cpc,mean_ssim,median_psnr");
        assert_eq!(lines[3], "Average,1,1,inf");
    }

    #[test]
    fn per_map_mean_matches_sample_rows() {
        let gen: Vec<EvalItem> = (0..4).map(|k| item("A", "A", k)).collect();
        let real: Vec<EvalItem> = (0..4).map(|k| item("A", "A", k + 1)).collect();
        let r = evaluate_run(&gen, &real).unwrap();
        let mut buf = Vec::new();
        r.write_samples_csv(&mut buf).unwrap();
        let mut rdr = csv::Reader::from_reader(&buf[..]);
        let cpcs: Vec<f64> = rdr.records().map(|row| row.unwrap()[5].parse().unwrap()).collect();
        assert_eq!(cpcs.len(), 4);
        assert_eq!(r.maps[0].mean_cpc, cpcs.iter().sum::<f64>() / 4.0);
    }

    #[test]
    fn misaligned_corpora_are_rejected() {
        let a = vec![item("A", "A", 0), item("A", "A", 1)];
        let b = vec![item("A", "A", 0)];
        assert!(matches!(evaluate_run(&a, &b), Err(MetricError::CorpusMisaligned(_))));
        let c = vec![item("B", "B", 0), item("B", "B", 1)];
        assert!(matches!(evaluate_run(&a, &c), Err(MetricError::CorpusMisaligned(_))));
    }

    #[test]
    fn checksum_csv_layout() {
        let mut buf = Vec::new();
        write_checksum_csv(&[("ground", Checksum { max: 3.0, avg: 1.0 })], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "source,max,avg\nground,3,1\n");
    }

    fn matrix(n: usize) -> impl Strategy<Value = FlowMatrix> {
        proptest::collection::vec(0u64..50, n * n).prop_map(move |mut v| {
            for i in 0..n {
                v[i * n + i] = 0;
            }
            FlowMatrix::new(n, v).unwrap()
        })
    }

    proptest! {
        #[test]
        fn cpc_is_symmetric_bounded_and_scale_free((g, r) in (matrix(5), matrix(5)), k in 1u64..20) {
            let c = cpc(&g, &r).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
            prop_assert_eq!(c, cpc(&r, &g).unwrap());
            let scale = |m: &FlowMatrix| FlowMatrix::new(5, m.counts().iter().map(|v| v * k).collect()).unwrap();
            prop_assert!((cpc(&scale(&g), &scale(&r)).unwrap() - c).abs() < 1e-12);
        }

        #[test]
        fn cpc_invariant_under_relabeling((g, r) in (matrix(5), matrix(5)), seed in 0u64..100) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permute = |m: &FlowMatrix| {
                let mut out = FlowMatrix::zeros(5);
                for i in 0..5 { for j in 0..5 { out.add(perm[i], perm[j], m.get(i, j)); } }
                out
            };
            prop_assert_eq!(cpc(&g, &r).unwrap(), cpc(&permute(&g), &permute(&r)).unwrap());
        }

        #[test]
        fn psnr_and_ssim_peak_only_at_equality(a in matrix(6), b in matrix(6)) {
            let ia = encode(&a, 4.0).unwrap();
            let ib = encode(&b, 4.0).unwrap();
            let p = psnr(&ia, &ib).unwrap();
            let s = ssim(&ia, &ib).unwrap();
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
            if a == b {
                prop_assert_eq!(p, f64::INFINITY);
                prop_assert_eq!(s, 1.0);
            } else {
                prop_assert!(p.is_finite());
                prop_assert!(s < 1.0 - 1e-12);
            }
        }
    }
}
