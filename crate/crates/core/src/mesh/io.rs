//! Trajectory container: `MMTJ`, u16 version, u32 header length, JSON
//! header, then little-endian payloads in a fixed order:
//! f32 positions, f32 fields, f32 inflow series (if present),
//! u32 node types, u32 senders, u32 receivers, u32 cells.

use super::features::Trajectory;
use super::graph::{MeshGraph, NodeType, NODE_TYPE_NAMES};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"MMTJ";
pub const TRAJECTORY_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub n_nodes: usize,
    pub n_edges: usize,
    pub n_steps: usize,
    pub dim: usize,
    pub n_fields: usize,
    pub n_cells: usize,
    pub dt: f64,
    pub globals: Vec<f32>,
    pub global_names: Vec<String>,
    pub node_types: Vec<String>,
    pub field_names: Vec<String>,
    pub has_inflow: bool,
}

pub fn trajectory_to_bytes(traj: &Trajectory) -> Result<Vec<u8>> {
    traj.validate()?;
    let g = &traj.graph;
    let header = TrajectoryHeader {
        n_nodes: g.n_nodes(),
        n_edges: g.n_edges(),
        n_steps: traj.n_steps,
        dim: g.dim,
        n_fields: traj.n_fields(),
        n_cells: g.n_cells(),
        dt: traj.dt,
        globals: traj.globals.clone(),
        global_names: traj.global_names.clone(),
        node_types: NODE_TYPE_NAMES.iter().map(|s| s.to_string()).collect(),
        field_names: traj.field_names.clone(),
        has_inflow: traj.inflow_series.is_some(),
    };
    let hbytes = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(TRAJECTORY_MAGIC);
    out.extend_from_slice(&TRAJECTORY_VERSION.to_le_bytes());
    out.extend_from_slice(&(hbytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&hbytes);
    let put_f32 = |out: &mut Vec<u8>, xs: &[f32]| {
        for x in xs {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    let put_u32 = |out: &mut Vec<u8>, xs: &mut dyn Iterator<Item = usize>| {
        for x in xs {
            out.extend_from_slice(&(x as u32).to_le_bytes());
        }
    };
    put_f32(&mut out, &g.positions);
    put_f32(&mut out, &traj.fields);
    if let Some(s) = &traj.inflow_series {
        put_f32(&mut out, s);
    }
    put_u32(&mut out, &mut g.node_type.iter().map(|t| t.index()));
    put_u32(&mut out, &mut g.senders.iter().copied());
    put_u32(&mut out, &mut g.receivers.iter().copied());
    put_u32(&mut out, &mut g.cells.iter().copied());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("payload truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u32s(&mut self, n: usize, what: &str) -> Result<Vec<u32>> {
        Ok(self
            .take(n * 4, what)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn trajectory_from_bytes(bytes: &[u8]) -> Result<Trajectory> {
    if bytes.len() < 10 || &bytes[..4] != TRAJECTORY_MAGIC {
        return Err(Error::Corrupt("malformed header: bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TRAJECTORY_VERSION {
        return Err(Error::Version {
            found: version,
            expected: TRAJECTORY_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let mut r = Reader { bytes, pos: 10 };
    let header: TrajectoryHeader = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| Error::Corrupt(format!("malformed header: {e}")))?;
    if header.node_types.len() != NODE_TYPE_NAMES.len()
        || header.node_types.iter().zip(NODE_TYPE_NAMES).any(|(a, b)| a != b)
    {
        return Err(Error::Corrupt("unsupported node-type vocabulary".into()));
    }
    let (n, e, s, d, q) = (
        header.n_nodes,
        header.n_edges,
        header.n_steps,
        header.dim,
        header.n_fields,
    );
    let positions = r.f32s(n * d, "positions")?;
    let fields = r.f32s(s * n * q, "fields")?;
    let inflow_series = if header.has_inflow {
        Some(r.f32s(s, "inflow_series")?)
    } else {
        None
    };
    let node_type = r
        .u32s(n, "node_type")?
        .into_iter()
        .map(NodeType::from_index)
        .collect::<Result<Vec<_>>>()?;
    let senders = r.u32s(e, "senders")?.into_iter().map(|x| x as usize).collect();
    let receivers = r.u32s(e, "receivers")?.into_iter().map(|x| x as usize).collect();
    let cells = r
        .u32s(header.n_cells * (d + 1), "cells")?
        .into_iter()
        .map(|x| x as usize)
        .collect();
    if r.pos != bytes.len() {
        return Err(Error::Corrupt("payload length mismatch: trailing bytes".into()));
    }
    let traj = Trajectory {
        graph: MeshGraph {
            dim: d,
            positions,
            node_type,
            senders,
            receivers,
            cells,
        },
        fields,
        n_steps: s,
        field_names: header.field_names,
        globals: header.globals,
        global_names: header.global_names,
        dt: header.dt,
        inflow_series,
    };
    traj.validate()
        .map_err(|e| Error::Corrupt(format!("decoded trajectory invalid: {e}")))?;
    Ok(traj)
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    crate::diffcore::write_atomic(path, &trajectory_to_bytes(traj)?)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    trajectory_from_bytes(&std::fs::read(path)?)
}
