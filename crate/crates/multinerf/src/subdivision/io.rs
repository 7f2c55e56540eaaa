//! Binary tree serialization.
//!
//! Little-endian throughout: magic "AMNF", format version u16, architecture
//! record (width, depth, l_pos, l_dir as u32), then pre-order node records:
//! code u32, box as 6 f32, split flag u8 + axis u8 + position f32, score f32,
//! and the parameter blob as f32. The pre-order split flags fully determine
//! the topology; stored codes are verified against it on load.

use super::{BuildConfig, KdNode, KdSplit, KdTree, NodeCode};
use crate::field::{MlpArch, MlpParams};
use crate::geometry::{Aabb, Vec3};
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"AMNF";
const VERSION: u16 = 1;

fn write_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f32(w: &mut impl Write, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::TreeFormat("unexpected end of tree file".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn write_node(w: &mut impl Write, node: &KdNode) -> Result<()> {
    write_u32(w, node.code.value())?;
    for v in [node.aabb.min(), node.aabb.max()] {
        for c in v.to_array() {
            write_f32(w, c as f32)?;
        }
    }
    match &node.split {
        Some(split) => {
            w.write_all(&[1u8, split.axis as u8])?;
            write_f32(w, split.position as f32)?;
        }
        None => {
            w.write_all(&[0u8, 0u8])?;
            write_f32(w, 0.0)?;
        }
    }
    write_f32(w, node.score_db as f32)?;
    for &p in node.mlp.data() {
        write_f32(w, p as f32)?;
    }
    if let Some(split) = &node.split {
        write_node(w, &split.children[0])?;
        write_node(w, &split.children[1])?;
    }
    Ok(())
}

pub fn save_tree(tree: &KdTree, w: &mut impl Write) -> Result<()> {
    w.write_all(&MAGIC)?;
    write_u16(w, VERSION)?;
    write_u32(w, tree.arch.width)?;
    write_u32(w, tree.arch.depth)?;
    write_u32(w, tree.arch.l_pos)?;
    write_u32(w, tree.arch.l_dir)?;
    write_node(w, &tree.root)
}

fn read_node(r: &mut impl Read, arch: MlpArch, expected: NodeCode) -> Result<KdNode> {
    let code = NodeCode::from_value(read_u32(r)?)?;
    if code != expected {
        return Err(Error::TreeFormat(format!(
            "node code {} does not match pre-order position {}",
            code.value(),
            expected.value()
        )));
    }
    let mut corners = [0f64; 6];
    for c in corners.iter_mut() {
        *c = read_f32(r)? as f64;
    }
    let aabb = Aabb::new(
        Vec3::new(corners[0], corners[1], corners[2]),
        Vec3::new(corners[3], corners[4], corners[5]),
    )
    .map_err(|e| Error::TreeFormat(format!("bad node box: {e}")))?;
    let flag = read_u8(r)?;
    let axis = read_u8(r)? as usize;
    let position = read_f32(r)? as f64;
    let score_db = read_f32(r)? as f64;
    let mut params = Vec::with_capacity(arch.param_count());
    for _ in 0..arch.param_count() {
        params.push(read_f32(r)? as f64);
    }
    let mlp = MlpParams::new(arch, params)
        .map_err(|e| Error::TreeFormat(format!("bad node parameters: {e}")))?;

    let split = match flag {
        0 => None,
        1 => {
            if axis > 2 {
                return Err(Error::TreeFormat(format!("split axis {axis} out of range")));
            }
            let left = read_node(r, arch, code.left())?;
            let right = read_node(r, arch, code.right())?;
            Some(KdSplit { axis, position, children: Box::new([left, right]) })
        }
        other => return Err(Error::TreeFormat(format!("bad split flag {other}"))),
    };
    Ok(KdNode { code, aabb, score_db, mlp, split })
}

pub fn load_tree(r: &mut impl Read) -> Result<KdTree> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if magic != MAGIC {
        return Err(Error::TreeFormat("bad magic, not a tree file".into()));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(Error::TreeFormat(format!("unsupported format version {version}")));
    }
    let arch = MlpArch {
        width: read_u32(r)?,
        depth: read_u32(r)?,
        l_pos: read_u32(r)?,
        l_dir: read_u32(r)?,
    };
    let root = read_node(r, arch, NodeCode::ROOT)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::TreeFormat("trailing bytes after tree".into()));
    }
    Ok(KdTree { arch, root, config: BuildConfig { arch, ..BuildConfig::default() } })
}

pub fn save_tree_file(tree: &KdTree, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_tree(tree, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_tree_file(path: &Path) -> Result<KdTree> {
    let mut r = BufReader::new(File::open(path)?);
    load_tree(&mut r)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{fast_config, two_blob_scene, unit_box};
    use super::super::{build_kdtree, build_regular_grid};
    use super::*;

    struct Empty;
    impl crate::field::RadianceField for Empty {
        fn eval(&self, _: Vec3, _: Vec3) -> crate::field::FieldSample {
            crate::field::FieldSample::EMPTY
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let tree = build_kdtree(&two_blob_scene(), unit_box(), &fast_config(61)).unwrap();
        let mut bytes = Vec::new();
        save_tree(&tree, &mut bytes).unwrap();
        let loaded = load_tree(&mut bytes.as_slice()).unwrap();
        let mut bytes2 = Vec::new();
        save_tree(&loaded, &mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
        assert_eq!(loaded.node_count(), tree.node_count());
        assert_eq!(loaded.arch, tree.arch);
    }

    #[test]
    fn roundtrip_preserves_structure() {
        let tree = build_regular_grid(&Empty, unit_box(), 2, &fast_config(62)).unwrap();
        let mut bytes = Vec::new();
        save_tree(&tree, &mut bytes).unwrap();
        let loaded = load_tree(&mut bytes.as_slice()).unwrap();
        let mut codes_a = Vec::new();
        let mut codes_b = Vec::new();
        tree.for_each_node(&mut |n| codes_a.push((n.code, n.is_leaf())));
        loaded.for_each_node(&mut |n| codes_b.push((n.code, n.is_leaf())));
        assert_eq!(codes_a, codes_b);
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = b"NOPE\x01\x00".to_vec();
        match load_tree(&mut bytes.as_slice()) {
            Err(Error::TreeFormat(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_rejected() {
        let tree = build_regular_grid(&Empty, unit_box(), 1, &fast_config(63)).unwrap();
        let mut bytes = Vec::new();
        save_tree(&tree, &mut bytes).unwrap();
        for cut in [3usize, 6, 20, bytes.len() - 1] {
            let slice = &bytes[..cut];
            assert!(load_tree(&mut &slice[..]).is_err(), "cut at {cut} not rejected");
        }
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(load_tree(&mut padded.as_slice()).is_err());
    }
}
