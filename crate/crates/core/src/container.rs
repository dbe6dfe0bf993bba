//! Shared text container for every artifact of the chain.
//!
//! A container is UTF-8 JSON lines: one [`Header`] object on the first line,
//! followed by `record_count` [`Record`] objects, one per line. Complex
//! values are `[re, im]` pairs. Floats use the shortest decimal form that
//! reads back to the identical `f64` (never more than 17 significant
//! digits), so write/read round trips are lossless.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibratedSpectrum;
use crate::channel_model::{ChannelPlan, CsiDataset, ErrorModel, GroundTruthChannel, InjectedErrors};
use crate::classify::{ProfileLibrary, RipenessLabel, RipenessProfile};
use crate::delay_profile::{DelayGrid, DelayProfile, DirectPathSpectrum};
use crate::error::{Error, Result};
use crate::features::FeatureVector;

pub const FORMAT: &str = "fruitsense-container";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    CsiDataset,
    CalibratedSpectrum,
    DelayProfile,
    DirectPathSpectrum,
    FeatureVector,
    ProfileLibrary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub kind: ArtifactKind,
    pub record_count: usize,
    #[serde(default)]
    pub calibrated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<ChannelPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coherence_warning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_model: Option<ErrorModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected: Option<InjectedErrors>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<GroundTruthChannel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_s_hat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_report: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<DelayGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency_offset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective_trace: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_taps: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fruit_kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_hash: Option<String>,
}

impl Header {
    pub fn new(kind: ArtifactKind) -> Self {
        Header {
            format: FORMAT.into(),
            version: VERSION,
            kind,
            record_count: 0,
            calibrated: false,
            plan: None,
            coherence_warning: None,
            error_model: None,
            injected: None,
            truth: None,
            phi_s_hat: None,
            residual_report: None,
            grid: None,
            frequency_offset: None,
            lambda: None,
            objective_trace: None,
            kept_taps: None,
            levels: None,
            source_len: None,
            fruit_kind: None,
            plan_hash: None,
        }
    }

    fn with_plan(kind: ArtifactKind, plan: &ChannelPlan) -> Self {
        Header {
            plan: Some(plan.clone()),
            coherence_warning: plan.coherence_warning(),
            ..Header::new(kind)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub packet: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<RipenessLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complex: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub real: Option<Vec<f64>>,
}

fn pairs(v: &[Complex64]) -> Vec<[f64; 2]> {
    v.iter().map(|c| [c.re, c.im]).collect()
}

fn unpairs(v: &[[f64; 2]]) -> Vec<Complex64> {
    v.iter().map(|p| Complex64::new(p[0], p[1])).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub records: Vec<Record>,
}

impl Container {
    pub fn new(mut header: Header, records: Vec<Record>) -> Self {
        header.record_count = records.len();
        Container { header, records }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let line = |e: serde_json::Error| Error::Format(e.to_string());
        serde_json::to_writer(&mut w, &self.header).map_err(line)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty container".into()))??;
        let header: Header =
            serde_json::from_str(&first).map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Format(format!("not a {FORMAT} file")));
        }
        if header.version != VERSION {
            return Err(Error::Format(format!("unsupported version {}", header.version)));
        }
        let mut records = Vec::with_capacity(header.record_count);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("record {i}: {e}")))?,
            );
        }
        if records.len() != header.record_count {
            return Err(Error::Format(format!(
                "header announces {} records, found {}",
                header.record_count,
                records.len()
            )));
        }
        Ok(Container { header, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    fn expect(&self, kind: ArtifactKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Format(format!("expected {kind:?}, found {:?}", self.header.kind)));
        }
        Ok(())
    }

    fn plan(&self) -> Result<ChannelPlan> {
        let plan = self
            .header
            .plan
            .clone()
            .ok_or_else(|| Error::Format("header has no plan".into()))?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Conversion between an artifact and its container form.
pub trait Artifact: Sized {
    fn to_container(&self) -> Container;
    fn from_container(c: Container) -> Result<Self>;

    fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

fn complex_field(r: &Record) -> Result<Vec<Complex64>> {
    r.complex
        .as_deref()
        .map(unpairs)
        .ok_or_else(|| Error::Format("record has no complex values".into()))
}

fn real_field(r: &Record) -> Result<Vec<f64>> {
    r.real
        .clone()
        .ok_or_else(|| Error::Format("record has no real values".into()))
}

impl Artifact for CsiDataset {
    fn to_container(&self) -> Container {
        let mut header = Header::with_plan(ArtifactKind::CsiDataset, &self.plan);
        header.error_model = self.error_model;
        header.injected = self.injected.clone();
        header.truth = self.truth.clone();
        let records = self
            .frames
            .iter()
            .enumerate()
            .flat_map(|(p, packet)| {
                packet.iter().enumerate().map(move |(q, frame)| Record {
                    packet: Some(p),
                    channel: Some(q),
                    complex: Some(pairs(frame)),
                    ..Default::default()
                })
            })
            .collect();
        Container::new(header, records)
    }

    fn from_container(c: Container) -> Result<Self> {
        c.expect(ArtifactKind::CsiDataset)?;
        let plan = c.plan()?;
        let n_ch = plan.channel_count();
        let n_pk = c.records.iter().filter_map(|r| r.packet).max().map_or(0, |p| p + 1);
        let mut cells: Vec<Vec<Option<Vec<Complex64>>>> = vec![vec![None; n_ch]; n_pk];
        for r in &c.records {
            let (p, q) = r
                .packet
                .zip(r.channel)
                .ok_or_else(|| Error::Format("dataset record needs packet and channel".into()))?;
            if q >= n_ch {
                return Err(Error::Format(format!("channel {q} outside the plan")));
            }
            if cells[p][q].replace(complex_field(r)?).is_some() {
                return Err(Error::Format(format!("duplicate record ({p}, {q})")));
            }
        }
        let frames = cells
            .into_iter()
            .enumerate()
            .map(|(p, row)| {
                row.into_iter()
                    .enumerate()
                    .map(|(q, cell)| cell.ok_or_else(|| Error::Format(format!("missing record ({p}, {q})"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = CsiDataset {
            plan,
            frames,
            truth: c.header.truth,
            error_model: c.header.error_model,
            injected: c.header.injected,
        };
        ds.validate()?;
        Ok(ds)
    }
}

impl Artifact for CalibratedSpectrum {
    fn to_container(&self) -> Container {
        let mut header = Header::with_plan(ArtifactKind::CalibratedSpectrum, &self.plan);
        header.calibrated = true;
        header.phi_s_hat = Some(self.estimated_phi_s);
        header.residual_report = Some(self.residual_report.clone());
        let records = self
            .per_channel
            .iter()
            .enumerate()
            .map(|(q, v)| Record {
                channel: Some(q),
                complex: Some(pairs(v)),
                ..Default::default()
            })
            .collect();
        Container::new(header, records)
    }

    fn from_container(c: Container) -> Result<Self> {
        c.expect(ArtifactKind::CalibratedSpectrum)?;
        if !c.header.calibrated {
            return Err(Error::Format("spectrum is not flagged as calibrated".into()));
        }
        let plan = c.plan()?;
        let mut per_channel = vec![Vec::new(); plan.channel_count()];
        for r in &c.records {
            let q = r.channel.ok_or_else(|| Error::Format("record needs a channel".into()))?;
            *per_channel
                .get_mut(q)
                .ok_or_else(|| Error::Format(format!("channel {q} outside the plan")))? = complex_field(r)?;
        }
        if per_channel.iter().any(|v| v.len() != plan.subcarrier_count_per_channel) {
            return Err(Error::Format("calibrated spectrum is incomplete".into()));
        }
        Ok(CalibratedSpectrum {
            plan,
            per_channel,
            estimated_phi_s: c.header.phi_s_hat.unwrap_or(0.0),
            residual_report: c.header.residual_report.unwrap_or_default(),
        })
    }
}

/// A delay profile together with the plan it was solved on.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedProfile {
    pub plan: ChannelPlan,
    pub profile: DelayProfile,
}

impl Artifact for PlannedProfile {
    fn to_container(&self) -> Container {
        let p = &self.profile;
        let mut header = Header::with_plan(ArtifactKind::DelayProfile, &self.plan);
        header.grid = Some(p.grid);
        header.frequency_offset = Some(p.frequency_offset);
        header.lambda = Some(p.lambda);
        header.objective_trace = Some(p.objective_trace.clone());
        let record = Record {
            field: Some("taps".into()),
            complex: Some(pairs(&p.taps)),
            ..Default::default()
        };
        Container::new(header, vec![record])
    }

    fn from_container(c: Container) -> Result<Self> {
        c.expect(ArtifactKind::DelayProfile)?;
        let plan = c.plan()?;
        let h = &c.header;
        let grid = h.grid.ok_or_else(|| Error::Format("profile header has no grid".into()))?;
        grid.validate()?;
        let taps = complex_field(c.records.first().ok_or_else(|| Error::Format("no taps".into()))?)?;
        if taps.len() != grid.count {
            return Err(Error::Format("tap count does not match the grid".into()));
        }
        Ok(PlannedProfile {
            plan,
            profile: DelayProfile {
                grid,
                taps,
                objective_trace: h.objective_trace.clone().unwrap_or_default(),
                frequency_offset: h.frequency_offset.unwrap_or(0.0),
                lambda: h.lambda.unwrap_or(0.0),
            },
        })
    }
}

impl Artifact for DirectPathSpectrum {
    fn to_container(&self) -> Container {
        let mut header = Header::new(ArtifactKind::DirectPathSpectrum);
        header.kept_taps = Some(self.kept_taps.clone());
        let records = vec![
            Record {
                field: Some("frequencies".into()),
                real: Some(self.frequencies.clone()),
                ..Default::default()
            },
            Record {
                field: Some("response".into()),
                complex: Some(pairs(&self.response)),
                ..Default::default()
            },
        ];
        Container::new(header, records)
    }

    fn from_container(c: Container) -> Result<Self> {
        c.expect(ArtifactKind::DirectPathSpectrum)?;
        let find = |name: &str| {
            c.records
                .iter()
                .find(|r| r.field.as_deref() == Some(name))
                .ok_or_else(|| Error::Format(format!("missing {name} record")))
        };
        let frequencies = real_field(find("frequencies")?)?;
        let response = complex_field(find("response")?)?;
        if frequencies.len() != response.len() {
            return Err(Error::Format("frequency and response lengths differ".into()));
        }
        Ok(DirectPathSpectrum {
            frequencies,
            response,
            kept_taps: c.header.kept_taps.unwrap_or_default(),
        })
    }
}

fn feature_records(fv: &FeatureVector, label: Option<RipenessLabel>, samples: Option<usize>) -> Vec<Record> {
    fv.levels()
        .enumerate()
        .map(|(j, v)| Record {
            label,
            sample_count: samples,
            level: Some(j),
            field: Some(if j < fv.detail.len() { "detail" } else { "approx" }.into()),
            real: Some(v.clone()),
            ..Default::default()
        })
        .collect()
}

fn features_from(records: &[&Record], levels: usize, source_len: usize) -> Result<FeatureVector> {
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; levels + 1];
    for r in records {
        let j = r.level.ok_or_else(|| Error::Format("feature record needs a level".into()))?;
        let slot = slots
            .get_mut(j)
            .ok_or_else(|| Error::Format(format!("level {j} out of range")))?;
        *slot = Some(real_field(r)?);
    }
    let mut all = slots
        .into_iter()
        .enumerate()
        .map(|(j, s)| s.ok_or_else(|| Error::Format(format!("missing level {j}"))))
        .collect::<Result<Vec<_>>>()?;
    let approx = all.pop().expect("levels + 1 slots");
    let fv = FeatureVector {
        detail: all,
        approx,
        source_len,
    };
    fv.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(fv)
}

impl Artifact for FeatureVector {
    fn to_container(&self) -> Container {
        let mut header = Header::new(ArtifactKind::FeatureVector);
        header.levels = Some(self.detail.len());
        header.source_len = Some(self.source_len);
        Container::new(header, feature_records(self, None, None))
    }

    fn from_container(c: Container) -> Result<Self> {
        c.expect(ArtifactKind::FeatureVector)?;
        let levels = c.header.levels.ok_or_else(|| Error::Format("header has no levels".into()))?;
        let n = c.header.source_len.ok_or_else(|| Error::Format("header has no source_len".into()))?;
        features_from(&c.records.iter().collect::<Vec<_>>(), levels, n)
    }
}

impl Artifact for ProfileLibrary {
    fn to_container(&self) -> Container {
        let mut header = Header::new(ArtifactKind::ProfileLibrary);
        header.fruit_kind = Some(self.fruit_kind.clone());
        header.plan_hash = Some(self.plan_hash.clone());
        if let Some(p) = self.profiles.first() {
            header.levels = Some(p.mean_features.detail.len());
            header.source_len = Some(p.mean_features.source_len);
        }
        let records = self
            .profiles
            .iter()
            .flat_map(|p| feature_records(&p.mean_features, Some(p.label), Some(p.sample_count)))
            .collect();
        Container::new(header, records)
    }

    fn from_container(c: Container) -> Result<Self> {
        c.expect(ArtifactKind::ProfileLibrary)?;
        let h = &c.header;
        let levels = h.levels.ok_or_else(|| Error::Format("header has no levels".into()))?;
        let n = h.source_len.ok_or_else(|| Error::Format("header has no source_len".into()))?;
        let mut labels: Vec<RipenessLabel> = Vec::new();
        for r in &c.records {
            let l = r.label.ok_or_else(|| Error::Format("library record needs a label".into()))?;
            if !labels.contains(&l) {
                labels.push(l);
            }
        }
        let profiles = labels
            .into_iter()
            .map(|label| {
                let recs: Vec<&Record> = c.records.iter().filter(|r| r.label == Some(label)).collect();
                Ok(RipenessProfile {
                    label,
                    mean_features: features_from(&recs, levels, n)?,
                    sample_count: recs[0].sample_count.unwrap_or(1),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let lib = ProfileLibrary {
            profiles,
            fruit_kind: h.fruit_kind.clone().unwrap_or_default(),
            plan_hash: h.plan_hash.clone().unwrap_or_default(),
        };
        lib.validate()?;
        Ok(lib)
    }
}
