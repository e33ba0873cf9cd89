//! Checkpoint container and legacy ASCII VTK output.

use std::io::{Read, Write};

use crate::error::{contract, Error, Result};
use crate::fespace::{FeSpace, Field};
use crate::scf::Checkpoint;

const MAGIC: &[u8; 8] = b"EIGSPLT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Magic bytes, little-endian format version, then the bincode payload.
pub fn write_checkpoint<W: Write>(cp: &Checkpoint, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    bincode::serialize_into(&mut w, cp).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &head[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(head[8..].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    bincode::deserialize_from(r).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Unstructured grid of the space's simplices with point fields and
/// per-leaf cell fields. Cell fields are indexed by leaf position in the view.
pub fn write_vtk<W: Write>(
    mut w: W,
    space: &FeSpace,
    point_data: &[(&str, &Field)],
    cell_data: &[(&str, &[f64])],
) -> Result<()> {
    for (name, f) in point_data {
        f.check_current(space).map_err(|_| Error::Contract(format!("point field {name} is not on this space")))?;
    }
    let n_leaves = space.view().n_leaves();
    for (name, c) in cell_data {
        if c.len() != n_leaves {
            return contract(format!("cell field {name} has {} values for {n_leaves} leaves", c.len()));
        }
    }
    let pts = space.dof_points();
    let els = space.elements();
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "eigsplit fields")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {} double", pts.len())?;
    for p in pts {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    writeln!(w, "CELLS {} {}", els.len(), 5 * els.len())?;
    for e in els {
        writeln!(w, "4 {} {} {} {}", e.dofs[0], e.dofs[1], e.dofs[2], e.dofs[3])?;
    }
    writeln!(w, "CELL_TYPES {}", els.len())?;
    for _ in els {
        writeln!(w, "10")?;
    }
    if !point_data.is_empty() {
        writeln!(w, "POINT_DATA {}", pts.len())?;
        for (name, f) in point_data {
            writeln!(w, "SCALARS {} double 1", sanitize(name))?;
            writeln!(w, "LOOKUP_TABLE default")?;
            for v in f.coeffs() {
                writeln!(w, "{v}")?;
            }
        }
    }
    if !cell_data.is_empty() {
        writeln!(w, "CELL_DATA {}", els.len())?;
        for (name, c) in cell_data {
            writeln!(w, "SCALARS {} double 1", sanitize(name))?;
            writeln!(w, "LOOKUP_TABLE default")?;
            for e in els {
                writeln!(w, "{}", c[e.leaf as usize])?;
            }
        }
    }
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hgt::Hgt;
    use std::sync::Arc;

    #[test]
    fn vtk_layout() {
        let tree = Hgt::cube(1.0, 1).unwrap();
        let space = Arc::new(FeSpace::build(&tree, &tree.root_view()).unwrap());
        let f = Field::from_fn(space.clone(), |p| p[0]);
        let eta = vec![1.0; space.view().n_leaves()];
        let mut out = Vec::new();
        write_vtk(&mut out, &space, &[("x coord", &f)], &[("eta", &eta)]).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert!(s.contains(&format!("POINTS {} double", space.n_dofs())));
        assert!(s.contains(&format!("CELL_TYPES {}", space.elements().len())));
        assert!(s.contains("SCALARS x_coord double 1"));
        let short = vec![0.0; 1];
        assert!(write_vtk(Vec::new(), &space, &[], &[("bad", &short)]).is_err());
    }

    #[test]
    fn header_is_checked() {
        assert!(matches!(read_checkpoint(&b"nonsense data"[..]), Err(Error::Checkpoint(_))));
        let mut bad = MAGIC.to_vec();
        bad.extend(99u32.to_le_bytes());
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Checkpoint(_))));
    }
}
