//! LDOM dataset file: magic `LDOM`, u16 version, little-endian throughout.

use std::path::Path;

use super::{DemoStep, Demonstration};
use crate::cloth_sim::{Camera, DepthImage};
use crate::error::{Error, Result};
use crate::graph::GraphObservation;
use crate::lang::{Direction, Language, TaskSpec, TaskType, TEMPLATES_PER_TASK};
use crate::spatial::Vec3;

const MAGIC: &[u8; 4] = b"LDOM";
const VERSION: u16 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(format!("LDOM: {}", msg.into()))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: usize) -> Result<()> {
        let v = u16::try_from(v).map_err(|_| bad(format!("{v} does not fit in u16")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| bad(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn points(&mut self, p: &[Vec3]) -> Result<()> {
        self.u32(p.len() * 3)?;
        p.iter().for_each(|q| self.f32s(q));
        Ok(())
    }

    fn step(&mut self, s: &DemoStep) -> Result<()> {
        self.f32s(&s.depth.values);
        self.u16(s.graph.nodes.len())?;
        s.graph.nodes.iter().for_each(|n| self.f32s(n));
        self.u32(s.graph.collision_edges.len())?;
        for &(a, b) in &s.graph.collision_edges {
            self.u16(a)?;
            self.u16(b)?;
        }
        self.u16(s.pick_node)?;
        self.u16(s.place_pixel.0)?;
        self.u16(s.place_pixel.1)?;
        self.points(&s.raw_positions)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("file is truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<usize> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| bad("length overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
    fn points(&mut self) -> Result<Vec<Vec3>> {
        let n = self.u32()?;
        if n % 3 != 0 {
            return Err(bad("position payload is not a multiple of 3"));
        }
        Ok(self.f32s(n)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    fn step(&mut self) -> Result<DemoStep> {
        let cam = Camera::default();
        let values = self.f32s(cam.size * cam.size)?;
        let depth = DepthImage { height: cam.size, width: cam.size, values, camera: cam };
        let k = self.u16()?;
        let nodes: Vec<Vec3> = self.f32s(k * 3)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let e = self.u32()?;
        let mut edges = Vec::with_capacity(e.min(1 << 20));
        for _ in 0..e {
            let (a, b) = (self.u16()?, self.u16()?);
            if a >= k || b >= k {
                return Err(bad("edge endpoint out of range"));
            }
            edges.push((a, b));
        }
        let pick_node = self.u16()?;
        let place_pixel = (self.u16()?, self.u16()?);
        let raw_positions = self.points()?;
        if k == 0 || pick_node >= k || place_pixel.0 >= cam.size || place_pixel.1 >= cam.size {
            return Err(bad("step indices out of range"));
        }
        // Nodes are copies of particle positions; recover their indices.
        let source_particles = nodes
            .iter()
            .map(|n| raw_positions.iter().position(|p| p == n).ok_or_else(|| bad("node is not a particle position")))
            .collect::<Result<Vec<_>>>()?;
        let mut graph = GraphObservation::from_nodes(nodes, source_particles);
        graph.collision_edges = edges;
        Ok(DemoStep { depth, graph, pick_node, place_pixel, raw_positions })
    }
}

pub fn write_dataset_bytes(demos: &[Demonstration]) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION as usize)?;
    w.u32(demos.len())?;
    for d in demos {
        w.u16(d.instruction.tokens.len())?;
        for &t in &d.instruction.tokens {
            w.u16(t as usize)?;
        }
        w.u8(d.instruction.task.task_type().code());
        w.u8(d.instruction.task.direction().code());
        w.u8(u8::try_from(d.steps.len()).map_err(|_| bad("too many steps"))?);
        for s in &d.steps {
            w.step(s)?;
        }
        w.points(&d.oracle_final_positions)?;
        w.u8(u8::try_from(d.negatives.len()).map_err(|_| bad("too many negatives"))?);
        for s in &d.negatives {
            w.step(s)?;
        }
    }
    Ok(w.0)
}

pub fn read_dataset_bytes(buf: &[u8]) -> Result<Vec<Demonstration>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let lang = Language::builtin();
    let count = r.u32()?;
    let mut demos = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n_tokens = r.u16()?;
        let tokens: Vec<u16> = (0..n_tokens).map(|_| r.u16().map(|t| t as u16)).collect::<Result<_>>()?;
        let task_type = TaskType::from_code(r.u8()?)?;
        let direction = Direction::from_code(r.u8()?)?;
        let task = TaskSpec::new(task_type, direction).map_err(|e| bad(e.to_string()))?;
        let text = lang.vocab.detokenize(&tokens);
        let template_id = (0..TEMPLATES_PER_TASK)
            .find(|&id| lang.grammar.generate_instruction(task, id).is_ok_and(|s| s == text))
            .ok_or_else(|| bad(format!("instruction `{text}` is not in the grammar for {task}")))?;
        let instruction = lang.instruction(task, template_id)?;
        if instruction.tokens[..] != tokens[..] {
            return Err(bad("token array does not match the grammar"));
        }
        let n_steps = r.u8()? as usize;
        if n_steps == 0 {
            return Err(bad("demonstration without steps"));
        }
        let steps = (0..n_steps).map(|_| r.step()).collect::<Result<Vec<_>>>()?;
        let oracle_final_positions = r.points()?;
        let n_neg = r.u8()? as usize;
        let negatives = (0..n_neg).map(|_| r.step()).collect::<Result<Vec<_>>>()?;
        demos.push(Demonstration { instruction, steps, oracle_final_positions, negatives });
    }
    if r.pos != buf.len() {
        return Err(bad("trailing bytes after the last demonstration"));
    }
    Ok(demos)
}

pub fn write_dataset(path: &Path, demos: &[Demonstration]) -> Result<()> {
    let bytes = write_dataset_bytes(demos)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Demonstration>> {
    read_dataset_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::demonstrate;

    fn sample() -> Vec<Demonstration> {
        let lang = Language::builtin();
        let a = TaskSpec::new(TaskType::CornerFold, Direction::TopLeft).unwrap();
        let b = TaskSpec::new(TaskType::HalfFold, Direction::BottomOverTop).unwrap();
        vec![
            demonstrate(a, lang.instruction(a, 4).unwrap(), 1).unwrap(),
            demonstrate(b, lang.instruction(b, 13).unwrap(), 2).unwrap(),
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let demos = sample();
        let bytes = write_dataset_bytes(&demos).unwrap();
        let back = read_dataset_bytes(&bytes).unwrap();
        assert_eq!(back, demos);
        assert_eq!(write_dataset_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = write_dataset_bytes(&sample()).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_dataset_bytes(&bad_magic), Err(Error::Format(_))));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(read_dataset_bytes(&bad_version).is_err());
        assert!(read_dataset_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
