use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use super::FeatureNetConfig;
use crate::error::{NkfError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NKF1";

/// Prefix of checkpoint segments that hold optimizer state rather than
/// network parameters.
pub const OPTIMIZER_PREFIX: &str = "optimizer.";

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Segment {
    fn zeros(name: &str, shape: &[usize]) -> Self {
        Self { name: name.to_string(), shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }
}

/// Names and shapes of every parameter array, in storage order.
pub(crate) fn layout(c: &FeatureNetConfig) -> Vec<(String, Vec<usize>)> {
    let (d, h, hh) = (c.channels, c.encoder_hidden, c.head_hidden);
    let [c1, c2, c3] = c.widths;
    let mut out = Vec::new();
    let mut dense = |name: &str, i: usize, o: usize| {
        out.push((format!("{name}.weight"), vec![i, o]));
        out.push((format!("{name}.bias"), vec![o]));
    };
    dense("encoder.0", 6, h);
    dense("encoder.1", h, h);
    dense("encoder.2", h, d);
    let mut conv = |name: &str, i: usize, o: usize| {
        out.push((format!("backbone.{name}.weight"), vec![27, i, o]));
        out.push((format!("backbone.{name}.bias"), vec![o]));
    };
    conv("down1", d, c1);
    conv("down2", c1, c2);
    conv("bottom", c2, c3);
    conv("up2", c3, c2);
    conv("up1", c2, c1);
    conv("out", c1, d);
    out.push(("head.0.weight".into(), vec![d, hh]));
    out.push(("head.0.bias".into(), vec![hh]));
    out.push(("head.1.weight".into(), vec![hh, 1]));
    out.push(("head.1.bias".into(), vec![1]));
    out
}

/// Layers whose parameters start at zero so an untrained network leaves the
/// kernel unchanged and predicts weight 1/2 everywhere.
/// Init scale of the output weights relative to the fan-in bound: small
/// enough that the untrained kernel is numerically close to the plain one.
pub const OUTPUT_INIT_SCALE: f64 = 1e-2;

fn zero_initialized(name: &str) -> bool {
    name == "backbone.out.bias" || name.starts_with("head.1.")
}

/// Parameters of the feature network as named flat segments.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNetworkParams {
    config: FeatureNetConfig,
    segments: Vec<Segment>,
}

impl FeatureNetworkParams {
    /// All parameters zero: the network outputs the zero feature.
    pub fn zeros(config: FeatureNetConfig) -> Result<Self> {
        config.validate()?;
        let segments = layout(&config).iter().map(|(n, s)| Segment::zeros(n, s)).collect();
        Ok(Self { config, segments })
    }

    /// Uniform fan-in scaled initialization. The output bias and the weight
    /// head's last layer start at zero (uniform weights of 1/2). The output
    /// weights start small but not zero, since zero features are a
    /// stationary point of the loss.
    pub fn init<R: Rng>(config: FeatureNetConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut fan_in = 1;
        for seg in &mut p.segments {
            if seg.name.ends_with(".weight") {
                fan_in = seg.shape[..seg.shape.len() - 1].iter().product();
            }
            if zero_initialized(&seg.name) {
                continue;
            }
            let mut bound = 1.0 / (fan_in as f64).sqrt();
            if seg.name == "backbone.out.weight" {
                bound *= OUTPUT_INIT_SCALE;
            }
            seg.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        }
        Ok(p)
    }

    pub fn config(&self) -> &FeatureNetConfig {
        &self.config
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segments_mut(&mut self) -> &mut [Segment] {
        &mut self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.segments.iter().map(|s| s.data.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.segments.iter().flat_map(|s| s.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(NkfError::DimensionMismatch { expected: self.num_params(), actual: flat.len() });
        }
        let mut at = 0;
        for s in &mut self.segments {
            let n = s.data.len();
            s.data.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, &[])
    }

    /// Writes the parameters followed by extra segments (for instance
    /// optimizer state named with [`OPTIMIZER_PREFIX`]).
    pub fn save_with(&self, path: &Path, extra: &[Segment]) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, extra)?;
        crate::io::ensure_parent(path)?;
        std::fs::write(path, buf).map_err(NkfError::at(path))?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W, extra: &[Segment]) -> Result<()> {
        let all: Vec<&Segment> = self.segments.iter().chain(extra).collect();
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&(self.config.resolution as u32).to_le_bytes())?;
        w.write_all(&(self.config.channels as u32).to_le_bytes())?;
        w.write_all(&(all.len() as u32).to_le_bytes())?;
        for s in all {
            w.write_all(&(s.name.len() as u32).to_le_bytes())?;
            w.write_all(s.name.as_bytes())?;
            w.write_all(&(s.data.len() as u32).to_le_bytes())?;
            for v in &s.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::load_with(path)?.0)
    }

    /// Loads parameters and returns any optimizer segments alongside.
    pub fn load_with(path: &Path) -> Result<(Self, Vec<Segment>)> {
        let bytes = std::fs::read(path).map_err(NkfError::at(path))?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<(Self, Vec<Segment>)> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(NkfError::BadMagic { expected: CHECKPOINT_MAGIC, actual: magic });
        }
        let resolution = read_u32(r, "resolution")? as usize;
        let channels = read_u32(r, "channels")? as usize;
        let count = read_u32(r, "segment count")? as usize;
        let mut raw = Vec::with_capacity(count);
        for i in 0..count {
            let len = read_u32(r, "name length")? as usize;
            let mut name = vec![0u8; len];
            read_exact(r, &mut name, "segment name")?;
            let name = String::from_utf8(name)
                .map_err(|_| NkfError::InvalidInput(format!("segment {i} name is not UTF-8")))?;
            let n = read_u32(r, "element count")? as usize;
            // bounded read so a corrupt count cannot force a huge allocation
            let mut bytes = Vec::new();
            r.by_ref().take(8 * n as u64).read_to_end(&mut bytes)?;
            if bytes.len() != 8 * n {
                return Err(NkfError::Truncated(name));
            }
            let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            raw.push((name, data));
        }
        let (optimizer, params): (Vec<_>, Vec<_>) = raw.into_iter().partition(|(n, _)| n.starts_with(OPTIMIZER_PREFIX));
        let config = infer_config(resolution, channels, &params)?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(NkfError::InvalidInput(format!(
                "checkpoint has {} parameter segments, expected {}",
                params.len(),
                expected.len()
            )));
        }
        let mut segments = Vec::with_capacity(expected.len());
        for ((name, shape), (got_name, data)) in expected.into_iter().zip(params) {
            let n: usize = shape.iter().product();
            if name != got_name || data.len() != n {
                return Err(NkfError::InvalidInput(format!(
                    "checkpoint segment {got_name} ({} values) does not match {name} ({n} values)",
                    data.len()
                )));
            }
            segments.push(Segment { name, shape, data });
        }
        let optimizer = optimizer
            .into_iter()
            .map(|(name, data): (String, Vec<f64>)| Segment { name, shape: vec![data.len()], data })
            .collect();
        Ok((Self { config, segments }, optimizer))
    }
}

fn infer_config(resolution: usize, channels: usize, params: &[(String, Vec<f64>)]) -> Result<FeatureNetConfig> {
    let size = |name: &str| {
        params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.len())
            .ok_or_else(|| NkfError::InvalidInput(format!("checkpoint lacks segment {name}")))
    };
    let per = |total: usize, unit: usize, name: &str| {
        if unit == 0 || total % unit != 0 {
            Err(NkfError::InvalidInput(format!("segment {name} has {total} values, not a multiple of {unit}")))
        } else {
            Ok(total / unit)
        }
    };
    let d = channels;
    let h = per(size("encoder.0.weight")?, 6, "encoder.0.weight")?;
    let c1 = per(size("backbone.down1.weight")?, 27 * d, "backbone.down1.weight")?;
    let c2 = per(size("backbone.down2.weight")?, 27 * c1, "backbone.down2.weight")?;
    let c3 = per(size("backbone.bottom.weight")?, 27 * c2, "backbone.bottom.weight")?;
    let hh = per(size("head.0.weight")?, d, "head.0.weight")?;
    let config = FeatureNetConfig {
        resolution,
        channels: d,
        encoder_hidden: h,
        widths: [c1, c2, c3],
        head_hidden: hh,
        ..FeatureNetConfig::default()
    };
    config.validate()?;
    Ok(config)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => NkfError::Truncated(what.to_string()),
        _ => NkfError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
