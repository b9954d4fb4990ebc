//! Model files: `EXVM`, format version, tagged spec fields, named tensors.
//! All integers and floats little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kinematics::TrajectoryRanges;

use super::net::Mode;
use super::{ConvBlock, Head, Model, NetworkSpec, Variant};

pub const MODEL_MAGIC: &[u8; 4] = b"EXVM";
pub const MODEL_VERSION: u16 = 1;

const TAG_VARIANT: u16 = 1;
const TAG_HEAD: u16 = 2;
const TAG_INPUT_DIMS: u16 = 3;
const TAG_POOL: u16 = 4;
const TAG_CONV: u16 = 5;
const TAG_FC: u16 = 6;
const TAG_RANGES: u16 = 7;
const TAG_VOLUME_SCALE: u16 = 8;
const TAG_KERNEL: u16 = 9;

fn u32s(v: impl IntoIterator<Item = usize>) -> Vec<u8> {
    v.into_iter().flat_map(|x| (x as u32).to_le_bytes()).collect()
}

fn spec_fields(s: &NetworkSpec) -> Vec<(u16, Vec<u8>)> {
    let conv =
        std::iter::once(s.conv_blocks.len()).chain(s.conv_blocks.iter().flat_map(|b| [b.out_channels, b.stride]));
    vec![
        (TAG_VARIANT, vec![matches!(s.variant, Variant::TrajNet) as u8]),
        (TAG_HEAD, vec![matches!(s.head, Head::Regressor) as u8]),
        (TAG_INPUT_DIMS, u32s(s.input_dims)),
        (TAG_POOL, u32s([s.pool])),
        (TAG_CONV, u32s(conv)),
        (
            TAG_FC,
            u32s(std::iter::once(s.fc_widths.len()).chain(s.fc_widths.iter().copied())),
        ),
        (
            TAG_RANGES,
            s.traj_ranges
                .lo
                .iter()
                .chain(&s.traj_ranges.hi)
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
        (TAG_VOLUME_SCALE, s.volume_scale.to_le_bytes().to_vec()),
        (TAG_KERNEL, u32s([3])),
    ]
}

pub fn write_model(mut w: impl Write, model: &Model) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let fields = spec_fields(model.spec());
    buf.extend_from_slice(&(fields.len() as u16).to_le_bytes());
    for (tag, data) in fields {
        buf.extend_from_slice(&tag.to_le_bytes());
        buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
        buf.extend_from_slice(&data);
    }
    buf.extend_from_slice(&(model.tensors().len() as u32).to_le_bytes());
    for t in model.tensors() {
        buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.dims.len() as u8);
        buf.extend(u32s(t.dims.iter().copied()));
        for v in model.tensor(&t.name).unwrap() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io("model stream", e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Data("model file truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse_spec(c: &mut Cursor) -> Result<NetworkSpec> {
    let mut variant = None;
    let mut head = None;
    let mut input_dims = None;
    let mut pool = None;
    let mut conv = None;
    let mut fc = None;
    let mut ranges = None;
    let mut volume_scale = None;
    for _ in 0..c.u16()? {
        let tag = c.u16()?;
        let len = c.u32()?;
        let mut f = Cursor {
            data: c.take(len)?,
            pos: 0,
        };
        match tag {
            TAG_VARIANT => {
                variant = Some(if f.u8()? == 1 {
                    Variant::TrajNet
                } else {
                    Variant::VoxelNet
                })
            }
            TAG_HEAD => {
                head = Some(if f.u8()? == 1 {
                    Head::Regressor
                } else {
                    Head::Classifier
                })
            }
            TAG_INPUT_DIMS => input_dims = Some([f.u32()?, f.u32()?, f.u32()?]),
            TAG_POOL => pool = Some(f.u32()?),
            TAG_CONV => {
                let n = f.u32()?;
                conv = Some(
                    (0..n)
                        .map(|_| {
                            Ok(ConvBlock {
                                out_channels: f.u32()?,
                                stride: f.u32()?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            TAG_FC => {
                let n = f.u32()?;
                fc = Some((0..n).map(|_| f.u32()).collect::<Result<Vec<_>>>()?);
            }
            TAG_RANGES => {
                let v: Vec<f64> = (0..12).map(|_| f.f64()).collect::<Result<_>>()?;
                ranges = Some(TrajectoryRanges {
                    lo: v[..6].try_into().unwrap(),
                    hi: v[6..].try_into().unwrap(),
                });
            }
            TAG_VOLUME_SCALE => volume_scale = Some(f.f64()?),
            TAG_KERNEL => match f.u32()? {
                3 => {}
                _ => return Err(Error::Spec("only 3x3x3 kernels are supported".into())),
            },
            _ => {}
        }
    }
    let missing = |what: &str| Error::Data(format!("model file lacks the {what} field"));
    Ok(NetworkSpec {
        variant: variant.ok_or_else(|| missing("variant"))?,
        head: head.ok_or_else(|| missing("head"))?,
        input_dims: input_dims.ok_or_else(|| missing("input dims"))?,
        pool: pool.ok_or_else(|| missing("pool"))?,
        conv_blocks: conv.ok_or_else(|| missing("conv blocks"))?,
        fc_widths: fc.ok_or_else(|| missing("fc widths"))?,
        traj_ranges: ranges.ok_or_else(|| missing("ranges"))?,
        volume_scale: volume_scale.ok_or_else(|| missing("volume scale"))?,
    })
}

/// Reads a model; it comes back in eval mode.
pub fn read_model(mut r: impl Read) -> Result<Model> {
    let mut data = Vec::new();
    r.read_to_end(&mut data).map_err(|e| Error::io("model stream", e))?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(4)? != MODEL_MAGIC {
        return Err(Error::Data("not a model file".into()));
    }
    let version = c.u16()?;
    if version != MODEL_VERSION {
        return Err(Error::Data(format!("unsupported model version {version}")));
    }
    let spec = parse_spec(&mut c)?;
    let mut model = Model::<f32>::zeros(&spec)?;
    let count = c.u32()?;
    if count != model.tensors().len() {
        return Err(Error::Data(format!(
            "model file has {count} tensors, spec implies {}",
            model.tensors().len()
        )));
    }
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Data("tensor name is not utf-8".into()))?;
        let rank = c.u8()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| c.u32()).collect::<Result<_>>()?;
        let info = model
            .tensors()
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Data(format!("unexpected tensor {name}")))?;
        if info.dims != dims {
            return Err(Error::Data(format!(
                "tensor {name} has dims {dims:?}, expected {:?}",
                info.dims
            )));
        }
        let n: usize = dims.iter().product();
        let raw = c.take(n * 4)?;
        let dst = model.tensor_mut(&name).unwrap();
        for (d, b) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(b.try_into().unwrap());
        }
    }
    if c.pos != data.len() {
        return Err(Error::Data("trailing bytes after model tensors".into()));
    }
    if !model.running_stats().iter().all(|v| v.is_finite()) {
        return Err(Error::Data("non-finite running statistics".into()));
    }
    model.set_mode(Mode::Eval);
    Ok(model)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_model(&mut w, model)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(BufReader::new(f))
}
