//! `DLFC` checkpoints.
//!
//! Layout: magic `DLFC`, u32 version, then tagged sections, each a 4-byte
//! tag, a u64 payload length and the payload. Sections appear in a fixed
//! order: `META`, one `PCA_` and one `GMM_` per channel, `NET_`, `OPT_`
//! (momentum buffers), `RNG_`, `LOG_`. Integers are little-endian u64 unless
//! noted, reals are float64 little-endian, matrices are row-major.

use std::path::Path;

use fisherlda_core::dataset::PcaModel;
use fisherlda_core::gmm::GmmModel;
use fisherlda_core::net::{BatchNorm, BnGrad, Linear, NetGrads, NetParams};
use fisherlda_core::trainer::{ChannelSpec, EpochRecord, TrainState};
use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"DLFC";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn reals<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for &v in vs {
            self.f64(v);
        }
    }
    fn vector(&mut self, v: &DVector<f64>) {
        self.reals(v.iter());
    }
    fn matrix(&mut self, m: &DMatrix<f64>) {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                self.f64(m[(r, c)]);
            }
        }
    }
    fn string(&mut self, s: &str) {
        self.buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

type Parse<T> = std::result::Result<T, String>;

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }
    fn take(&mut self, n: usize) -> Parse<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated {} section", self.what)),
        }
    }
    fn u8(&mut self) -> Parse<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Parse<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Parse<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    /// A count or dimension, bounded by the bytes left so corrupt input
    /// cannot trigger huge allocations.
    fn usize(&mut self) -> Parse<usize> {
        let v = self.u64()?;
        if v > self.bytes.len() as u64 * 8 {
            return Err(format!("implausible size {v} in {} section", self.what));
        }
        Ok(v as usize)
    }
    fn f64(&mut self) -> Parse<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn reals(&mut self, n: usize) -> Parse<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or("size overflow")?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn vector(&mut self, n: usize) -> Parse<DVector<f64>> {
        Ok(DVector::from_vec(self.reals(n)?))
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Parse<DMatrix<f64>> {
        let n = rows.checked_mul(cols).ok_or("size overflow")?;
        Ok(DMatrix::from_row_slice(rows, cols, &self.reals(n)?))
    }
    fn string(&mut self) -> Parse<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid utf-8 in string".into())
    }
    fn flag(&mut self) -> Parse<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(format!("bad flag byte {b} in {} section", self.what)),
        }
    }
    fn finish(&self) -> Parse<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(format!("{} trailing bytes in {} section", self.bytes.len() - self.pos, self.what))
        }
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], body: Writer) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(body.buf.len() as u64).to_le_bytes());
    out.extend_from_slice(&body.buf);
}

fn write_linear_dims(w: &mut Writer, layers: &[Linear]) {
    w.usize(layers.len());
    for l in layers {
        w.usize(l.input_dim());
        w.usize(l.output_dim());
    }
}

fn write_linear_values(w: &mut Writer, l: &Linear) {
    w.matrix(&l.weight);
    w.vector(&l.bias);
}

fn write_head(w: &mut Writer, head: &Option<Linear>) {
    match head {
        Some(h) => {
            w.u8(1);
            w.usize(h.input_dim());
            w.usize(h.output_dim());
            write_linear_values(w, h);
        }
        None => w.u8(0),
    }
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let mut w = Writer::default();
    w.usize(state.epoch);
    w.u64(state.step);
    w.usize(state.classes.len());
    for &c in &state.classes {
        w.usize(c);
    }
    w.usize(state.channels.len());
    for c in &state.channels {
        w.string(&c.name);
        w.usize(c.columns.0);
        w.usize(c.columns.1);
        w.usize(c.pca_dim);
        w.usize(c.components);
    }
    section(&mut out, b"META", w);

    for p in &state.pcas {
        let mut w = Writer::default();
        w.usize(p.raw_dim());
        w.usize(p.out_dim());
        w.vector(&p.mean);
        w.matrix(&p.basis);
        w.vector(&p.explained_variance);
        section(&mut out, b"PCA_", w);
    }
    for g in &state.gmms {
        let mut w = Writer::default();
        w.usize(g.num_components());
        w.usize(g.dim());
        w.vector(&g.log_weights_unnorm);
        w.matrix(&g.means);
        w.matrix(&g.log_vars);
        section(&mut out, b"GMM_", w);
    }

    let net = &state.net;
    let mut w = Writer::default();
    write_linear_dims(&mut w, &net.layers);
    for l in &net.layers {
        write_linear_values(&mut w, l);
    }
    match &net.bn {
        Some(bn) => {
            w.u8(1);
            w.vector(&bn.gamma);
            w.vector(&bn.beta);
            w.vector(&bn.running_mean);
            w.vector(&bn.running_var);
        }
        None => w.u8(0),
    }
    write_head(&mut w, &net.head);
    w.f64(net.dropout_rate);
    section(&mut out, b"NET_", w);

    let m = &state.momentum;
    let mut w = Writer::default();
    write_linear_dims(&mut w, &m.layers);
    for l in &m.layers {
        write_linear_values(&mut w, l);
    }
    match &m.bn {
        Some(bn) => {
            w.u8(1);
            w.vector(&bn.gamma);
            w.vector(&bn.beta);
        }
        None => w.u8(0),
    }
    write_head(&mut w, &m.head);
    section(&mut out, b"OPT_", w);

    let mut w = Writer::default();
    w.buf.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.buf.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    section(&mut out, b"RNG_", w);

    let mut w = Writer::default();
    w.usize(state.log.len());
    for r in &state.log {
        w.usize(r.epoch);
        w.f64(r.loss);
        w.f64(r.lr);
        w.usize(r.eigenvalues.len());
        w.reals(&r.eigenvalues);
        match r.eta {
            Some(eta) => {
                w.u8(1);
                w.f64(eta);
            }
            None => w.u8(0),
        }
    }
    section(&mut out, b"LOG_", w);
    out
}

struct Sections<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Sections<'a> {
    fn expect(&mut self, tag: &[u8; 4], what: &'static str) -> Parse<Reader<'a>> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < 12 {
            return Err(format!("missing {what} section"));
        }
        if &rest[..4] != tag {
            return Err(format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(&rest[..4])
            ));
        }
        let len = u64::from_le_bytes(rest[4..12].try_into().unwrap());
        if len > (rest.len() - 12) as u64 {
            return Err(format!("truncated {what} section"));
        }
        let len = len as usize;
        self.pos += 12 + len;
        Ok(Reader::new(&rest[12..12 + len], what))
    }
}

fn read_linears(r: &mut Reader) -> Parse<Vec<Linear>> {
    let n = r.usize()?;
    let mut dims = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        dims.push((r.usize()?, r.usize()?));
    }
    dims.into_iter()
        .map(|(input, output)| {
            Ok(Linear {
                weight: r.matrix(output, input)?,
                bias: r.vector(output)?,
            })
        })
        .collect()
}

fn read_head(r: &mut Reader) -> Parse<Option<Linear>> {
    if !r.flag()? {
        return Ok(None);
    }
    let (input, output) = (r.usize()?, r.usize()?);
    Ok(Some(Linear {
        weight: r.matrix(output, input)?,
        bias: r.vector(output)?,
    }))
}

fn decode_inner(bytes: &[u8]) -> Parse<TrainState> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err("not a DLFC checkpoint (bad magic)".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let mut s = Sections { bytes, pos: 8 };

    let mut r = s.expect(b"META", "meta")?;
    let epoch = r.usize()?;
    let step = r.u64()?;
    let nc = r.usize()?;
    let classes = (0..nc).map(|_| r.usize()).collect::<Parse<Vec<_>>>()?;
    let nch = r.usize()?;
    let mut channels = Vec::with_capacity(nch.min(64));
    for _ in 0..nch {
        channels.push(ChannelSpec {
            name: r.string()?,
            columns: (r.usize()?, r.usize()?),
            pca_dim: r.usize()?,
            components: r.usize()?,
        });
    }
    r.finish()?;

    let mut pcas = Vec::with_capacity(nch);
    for _ in 0..nch {
        let mut r = s.expect(b"PCA_", "pca")?;
        let (raw, out) = (r.usize()?, r.usize()?);
        pcas.push(PcaModel {
            mean: r.vector(raw)?,
            basis: r.matrix(out, raw)?,
            explained_variance: r.vector(out)?,
        });
        r.finish()?;
    }
    let mut gmms = Vec::with_capacity(nch);
    for _ in 0..nch {
        let mut r = s.expect(b"GMM_", "gmm")?;
        let (k, d) = (r.usize()?, r.usize()?);
        gmms.push(GmmModel {
            log_weights_unnorm: r.vector(k)?,
            means: r.matrix(k, d)?,
            log_vars: r.matrix(k, d)?,
        });
        r.finish()?;
    }

    let mut r = s.expect(b"NET_", "net")?;
    let layers = read_linears(&mut r)?;
    let width = layers.last().map_or(0, |l| l.output_dim());
    let bn = if r.flag()? {
        Some(BatchNorm {
            gamma: r.vector(width)?,
            beta: r.vector(width)?,
            running_mean: r.vector(width)?,
            running_var: r.vector(width)?,
        })
    } else {
        None
    };
    let head = read_head(&mut r)?;
    let dropout_rate = r.f64()?;
    r.finish()?;
    let net = NetParams {
        layers,
        bn,
        head,
        dropout_rate,
    };

    let mut r = s.expect(b"OPT_", "optimizer")?;
    let layers = read_linears(&mut r)?;
    let bn = if r.flag()? {
        Some(BnGrad {
            gamma: r.vector(width)?,
            beta: r.vector(width)?,
        })
    } else {
        None
    };
    let head = read_head(&mut r)?;
    r.finish()?;
    let momentum = NetGrads { layers, bn, head };

    let mut r = s.expect(b"RNG_", "rng")?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    r.finish()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut r = s.expect(b"LOG_", "log")?;
    let n = r.usize()?;
    let mut log = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let epoch = r.usize()?;
        let loss = r.f64()?;
        let lr = r.f64()?;
        let ne = r.usize()?;
        let eigenvalues = r.reals(ne)?;
        let eta = if r.flag()? { Some(r.f64()?) } else { None };
        log.push(EpochRecord {
            epoch,
            loss,
            lr,
            eigenvalues,
            eta,
        });
    }
    r.finish()?;
    if s.pos != bytes.len() {
        return Err("trailing bytes after the last section".into());
    }

    let state = TrainState {
        channels,
        pcas,
        gmms,
        net,
        momentum,
        epoch,
        step,
        rng,
        classes,
        log,
    };
    state.check_ready().map_err(|e| e.to_string())?;
    if !same_shape(&state.momentum, &NetGrads::zeros_like(&state.net)) {
        return Err("optimizer buffers do not match the network shape".into());
    }
    Ok(state)
}

fn same_shape(a: &NetGrads, b: &NetGrads) -> bool {
    let linear = |x: &Linear, y: &Linear| x.weight.shape() == y.weight.shape() && x.bias.len() == y.bias.len();
    a.layers.len() == b.layers.len()
        && a.layers.iter().zip(&b.layers).all(|(x, y)| linear(x, y))
        && a.bn.is_some() == b.bn.is_some()
        && match (&a.head, &b.head) {
            (Some(x), Some(y)) => linear(x, y),
            (None, None) => true,
            _ => false,
        }
}

/// Parses a checkpoint; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<TrainState> {
    decode_inner(bytes).map_err(|m| CliError::format(path, m))
}

pub fn read(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, state: &TrainState) -> Result<()> {
    std::fs::write(path, encode(state)).map_err(|e| CliError::io(path, e))
}
