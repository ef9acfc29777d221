//! `.toybody` dataset files: a container of per-sample named arrays with a
//! text header carrying the schema version, sample count, world config, and
//! seed provenance. Geometry is stored as f64, images as f32.

use std::path::Path;

use ndarray::Array2;

use super::body::WorldConfig;
use super::render::OccluderSpec;
use super::ToyBodySample;
use crate::container::{ArrayData, Container, ContainerError, NamedArray};
use crate::geometry::CameraParams;

pub const DATASET_KIND: &str = "toybody-dataset";
pub const DATASET_SCHEMA: u32 = 1;

/// An in-memory dataset split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<ToyBodySample>,
    pub world: WorldConfig,
    pub seed_provenance: String,
}

fn f32_array(name: &str, dims: Vec<usize>, data: &Array2<f64>) -> NamedArray {
    NamedArray {
        name: name.to_string(),
        dims,
        data: ArrayData::F32(data.iter().map(|&v| v as f32).collect()),
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), ContainerError> {
    let header = format!(
        "kind = {DATASET_KIND}\nschema = {DATASET_SCHEMA}\nsample_count = {}\n\
         image_h = {}\nimage_w = {}\nring_size_small = {}\nring_size_large = {}\n\
         fine_per_coarse = {}\nocclusion_prob = {}\noccluder_side_lo = {}\n\
         occluder_side_hi = {}\nseed_provenance = {}\n",
        ds.samples.len(),
        ds.world.image_h,
        ds.world.image_w,
        ds.world.ring_size_small,
        ds.world.ring_size_large,
        ds.world.fine_per_coarse,
        ds.world.occlusion_prob,
        ds.world.occluder_side.0,
        ds.world.occluder_side.1,
        ds.seed_provenance,
    );
    let mut c = Container::new(header);
    for (i, s) in ds.samples.iter().enumerate() {
        let p = format!("s{i:05}");
        c.push(NamedArray::f64_2d(&format!("{p}/pose"), &s.pose_params));
        c.push(NamedArray::f64_2d(
            &format!("{p}/shape"),
            &Array2::from_elem((1, 1), s.shape_scale),
        ));
        c.push(NamedArray::f64_2d(&format!("{p}/fine"), &s.fine_vertices));
        c.push(NamedArray::f64_2d(&format!("{p}/j3d"), &s.joints3d));
        c.push(NamedArray::f64_2d(&format!("{p}/j2d"), &s.joints2d));
        c.push(NamedArray {
            name: format!("{p}/vis"),
            dims: vec![s.visibility.len()],
            data: ArrayData::U8(s.visibility.iter().map(|&v| v as u8).collect()),
        });
        c.push(NamedArray::f64_2d(
            &format!("{p}/cam"),
            &Array2::from_shape_vec(
                (1, 3),
                vec![s.camera.scale, s.camera.translation[0], s.camera.translation[1]],
            )
            .unwrap(),
        ));
        c.push(f32_array(
            &format!("{p}/image"),
            vec![3, s.image_h * s.image_w],
            &s.image,
        ));
        let occ = match &s.occluder {
            Some(o) => vec![
                1.0,
                o.center[0],
                o.center[1],
                o.size[0],
                o.size[1],
                o.noise_fill as u8 as f64,
            ],
            None => vec![0.0; 6],
        };
        c.push(NamedArray::f64_2d(
            &format!("{p}/occ"),
            &Array2::from_shape_vec((1, 6), occ).unwrap(),
        ));
    }
    c.write_to(path)
}

pub fn read_dataset(path: &Path) -> Result<Dataset, ContainerError> {
    let c = Container::read_from(path)?;
    let kind = c.header_field("kind").unwrap_or("");
    if kind != DATASET_KIND {
        return Err(ContainerError::InvalidRecord {
            record: "header".into(),
            reason: format!("expected kind {DATASET_KIND}, got {kind}"),
        });
    }
    let schema: u32 = c
        .header_field("schema")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    if schema != DATASET_SCHEMA {
        return Err(ContainerError::VersionMismatch {
            found: schema,
            supported: DATASET_SCHEMA,
        });
    }
    let field_usize = |key: &str| -> Result<usize, ContainerError> {
        c.header_field(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ContainerError::InvalidRecord {
                record: "header".into(),
                reason: format!("missing or invalid {key}"),
            })
    };
    let field_f64 = |key: &str| -> Result<f64, ContainerError> {
        c.header_field(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ContainerError::InvalidRecord {
                record: "header".into(),
                reason: format!("missing or invalid {key}"),
            })
    };
    let world = WorldConfig {
        ring_size_small: field_usize("ring_size_small")?,
        ring_size_large: field_usize("ring_size_large")?,
        fine_per_coarse: field_usize("fine_per_coarse")?,
        image_h: field_usize("image_h")?,
        image_w: field_usize("image_w")?,
        occlusion_prob: field_f64("occlusion_prob")?,
        occluder_side: (field_f64("occluder_side_lo")?, field_f64("occluder_side_hi")?),
    };
    let count = field_usize("sample_count")?;

    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let p = format!("s{i:05}");
        let pose = c.get(&format!("{p}/pose"))?.to_f64_2d()?;
        let shape = c.get(&format!("{p}/shape"))?.to_f64_2d()?[(0, 0)];
        let fine = c.get(&format!("{p}/fine"))?.to_f64_2d()?;
        let j3d = c.get(&format!("{p}/j3d"))?.to_f64_2d()?;
        let j2d = c.get(&format!("{p}/j2d"))?.to_f64_2d()?;
        let vis_arr = c.get(&format!("{p}/vis"))?;
        let vis = vis_arr
            .data
            .as_u8()
            .ok_or_else(|| ContainerError::InvalidRecord {
                record: format!("{p}/vis"),
                reason: "expected u8".into(),
            })?
            .iter()
            .map(|&b| b != 0)
            .collect();
        let cam = c.get(&format!("{p}/cam"))?.to_f64_2d()?;
        let img_arr = c.get(&format!("{p}/image"))?;
        let img_f32 = img_arr
            .data
            .as_f32()
            .ok_or_else(|| ContainerError::InvalidRecord {
                record: format!("{p}/image"),
                reason: "expected f32".into(),
            })?;
        let image = Array2::from_shape_vec(
            (3, world.image_h * world.image_w),
            img_f32.iter().map(|&v| v as f64).collect(),
        )
        .map_err(|e| ContainerError::InvalidRecord {
            record: format!("{p}/image"),
            reason: e.to_string(),
        })?;
        let occ = c.get(&format!("{p}/occ"))?.to_f64_2d()?;
        let occluder = if occ[(0, 0)] != 0.0 {
            Some(OccluderSpec {
                center: [occ[(0, 1)], occ[(0, 2)]],
                size: [occ[(0, 3)], occ[(0, 4)]],
                noise_fill: occ[(0, 5)] != 0.0,
            })
        } else {
            None
        };
        samples.push(ToyBodySample {
            pose_params: pose,
            shape_scale: shape,
            fine_vertices: fine,
            joints3d: j3d,
            joints2d: j2d,
            visibility: vis,
            camera: CameraParams {
                scale: cam[(0, 0)],
                translation: [cam[(0, 1)], cam[(0, 2)]],
            },
            image,
            image_h: world.image_h,
            image_w: world.image_w,
            occluder,
        });
    }
    Ok(Dataset {
        samples,
        world,
        seed_provenance: c.header_field("seed_provenance").unwrap_or("").to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::body::{build_toy_model, sample_body, sample_occluder};
    use crate::synth::render::occlude;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn make_dataset(n: usize) -> Dataset {
        let cfg = WorldConfig::default();
        let model = build_toy_model(&cfg).unwrap();
        let mut samples = Vec::new();
        for i in 0..n {
            let mut rng = ChaCha20Rng::seed_from_u64(1000 + i as u64);
            let mut s = sample_body(&model, &mut rng, &cfg);
            if rng.gen::<f64>() < cfg.occlusion_prob {
                let rect = sample_occluder(&s, &mut rng, &cfg);
                occlude(&mut s.image, &rect, &cfg, &mut rng);
                for j in 0..model.joint_count {
                    if crate::synth::render::point_in_rect(
                        [s.joints2d[(j, 0)], s.joints2d[(j, 1)]],
                        &rect,
                    ) {
                        s.visibility[j] = false;
                    }
                }
                s.occluder = Some(rect);
            }
            samples.push(s);
        }
        Dataset {
            samples,
            world: cfg,
            seed_provenance: "test-range-1000".into(),
        }
    }

    #[test]
    fn write_then_read_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.toybody");
        let ds = make_dataset(12);
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in back.samples.iter().zip(ds.samples.iter()) {
            assert_eq!(a.pose_params, b.pose_params);
            assert_eq!(a.joints3d, b.joints3d);
            assert_eq!(a.visibility, b.visibility);
            assert_eq!(a.camera, b.camera);
            assert_eq!(a.occluder, b.occluder);
            // Images round-trip through f32 storage; re-reading what was
            // written is still bit-exact at f32.
            for (x, y) in a.image.iter().zip(b.image.iter()) {
                assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
            }
        }
        // Writing the re-read dataset reproduces the file byte for byte.
        let path2 = dir.path().join("ds2.toybody");
        write_dataset(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_dataset_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.toybody");
        write_dataset(&path, &make_dataset(3)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(read_dataset(&path).is_err());
    }

    #[test]
    fn occluded_samples_survive_round_trip() {
        let ds = make_dataset(20);
        let occluded = ds.samples.iter().filter(|s| s.is_occluded()).count();
        assert!(occluded > 0, "expected some occluded samples");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.toybody");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        let occluded_back = back.samples.iter().filter(|s| s.is_occluded()).count();
        assert_eq!(occluded, occluded_back);
    }
}
