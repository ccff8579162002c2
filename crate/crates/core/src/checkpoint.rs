//! Binary checkpoints for networks and representation trackers.
//!
//! Layout (little-endian): magic `b"LRFR"`, format version `u32`, payload
//! kind `u32`, layer count `L` as `u32`, the `L + 1` layer sizes as `u32`,
//! then the payload.
//!
//! Network payload: classes `u32`, seed `u64`, the `L` weight matrices
//! row-major as `f64`, task count `u32`, and per task: id `u32`, per layer
//! scale, shift, running mean and running variance, then head weight and
//! head bias.
//!
//! Tracker payload: relative tolerance `f64`, seen samples `u64`, then each
//! layer's `a_l × a_l` matrix row-major.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::network::{BatchNormParams, Head, Network, TaskParams};
use crate::representation::RepTracker;

pub const MAGIC: &[u8; 4] = b"LRFR";
pub const VERSION: u32 = 1;
const KIND_NETWORK: u32 = 1;
const KIND_TRACKER: u32 = 2;

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    fn count(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
        self.u32(v)
    }

    fn f64s(&mut self, values: &[f64]) -> Result<()> {
        for v in values {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    fn header(&mut self, kind: u32, sizes: &[usize]) -> Result<()> {
        self.inner.write_all(MAGIC)?;
        self.u32(VERSION)?;
        self.u32(kind)?;
        self.count(sizes.len() - 1)?;
        for &s in sizes {
            self.count(s)?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::TruncatedFile("checkpoint ended early".into()),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DenseMatrix> {
        DenseMatrix::new(rows, cols, self.f64s(rows * cols)?)
    }

    /// Returns the layer sizes.
    fn header(&mut self, kind: u32) -> Result<Vec<usize>> {
        let magic: [u8; 4] = self.bytes()?;
        if &magic != MAGIC {
            return Err(Error::BadMagic {
                expected: u32::from_be_bytes(*MAGIC),
                found: u32::from_be_bytes(magic),
            });
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let found = self.u32()?;
        if found != kind {
            return Err(Error::Checkpoint(format!("payload kind {found}, expected {kind}")));
        }
        let layers = self.usize()?;
        if layers == 0 {
            return Err(Error::Checkpoint("no layers".into()));
        }
        (0..=layers).map(|_| self.usize()).collect()
    }
}

pub fn write_network<W: Write>(net: &Network, out: W) -> Result<()> {
    let mut w = Writer { inner: out };
    w.header(KIND_NETWORK, net.layer_sizes())?;
    w.count(net.num_classes())?;
    w.u64(net.seed())?;
    for m in net.weights() {
        w.f64s(m.data())?;
    }
    w.count(net.tasks().len())?;
    for (&id, params) in net.tasks() {
        w.u32(id)?;
        for bn in &params.bn {
            w.f64s(&bn.scale)?;
            w.f64s(&bn.shift)?;
            w.f64s(&bn.running_mean)?;
            w.f64s(&bn.running_var)?;
        }
        w.f64s(params.head.weight.data())?;
        w.f64s(&params.head.bias)?;
    }
    Ok(w.inner.flush()?)
}

pub fn read_network<R: Read>(input: R) -> Result<Network> {
    let mut r = Reader { inner: input };
    let sizes = r.header(KIND_NETWORK)?;
    let classes = r.usize()?;
    let seed = r.u64()?;
    let weights = sizes
        .windows(2)
        .map(|w| r.matrix(w[0], w[1]))
        .collect::<Result<Vec<_>>>()?;
    let n_tasks = r.usize()?;
    let last = *sizes.last().expect("non-empty sizes");
    let mut tasks = BTreeMap::new();
    for _ in 0..n_tasks {
        let id = r.u32()?;
        let mut bn = Vec::with_capacity(sizes.len() - 1);
        for &width in &sizes[1..] {
            let params = BatchNormParams {
                scale: r.f64s(width)?,
                shift: r.f64s(width)?,
                running_mean: r.f64s(width)?,
                running_var: r.f64s(width)?,
            };
            if params.running_var.iter().any(|v| *v < 0.0) {
                return Err(Error::Checkpoint(format!("negative running variance in task {id}")));
            }
            bn.push(params);
        }
        let head = Head {
            weight: r.matrix(last, classes)?,
            bias: r.f64s(classes)?,
        };
        tasks.insert(id, TaskParams { bn, head });
    }
    Ok(Network::from_parts(sizes, classes, seed, weights, tasks))
}

pub fn write_tracker<W: Write>(tracker: &RepTracker, out: W) -> Result<()> {
    let mut w = Writer { inner: out };
    let dims = tracker.dims();
    // trackers are keyed by layer input widths; the trailing size is unused
    let mut sizes = dims.clone();
    sizes.push(0);
    w.header(KIND_TRACKER, &sizes)?;
    w.f64s(&[tracker.rel_tol()])?;
    w.u64(tracker.seen_samples() as u64)?;
    for m in tracker.fbar() {
        w.f64s(m.data())?;
    }
    Ok(w.inner.flush()?)
}

pub fn read_tracker<R: Read>(input: R) -> Result<RepTracker> {
    let mut r = Reader { inner: input };
    let sizes = r.header(KIND_TRACKER)?;
    let rel_tol = r.f64s(1)?[0];
    let seen = r.u64()? as usize;
    let fbar = sizes[..sizes.len() - 1]
        .iter()
        .map(|&a| r.matrix(a, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(RepTracker::from_parts(fbar, seen, rel_tol))
}
