//! Binary network checkpoints: a small JSON header (architecture plus the
//! epoch the parameters came from) followed by the flat parameter vector as
//! little-endian f32. The header keeps checkpoints self-describing, so
//! `load` rebuilds the network without any external configuration.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use cytoloc_core::{Network, NetworkConfig};

const MAGIC: &[u8; 8] = b"CYTOLOC\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    epoch: u32,
}

/// Writes `network`'s parameters tagged with the epoch they were taken from.
pub fn save(path: &Path, network: &Network, epoch: u32) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: network.config().clone(),
        epoch,
    })?;
    let params = network.flat_params();

    let file =
        File::create(path).with_context(|| format!("creating checkpoint {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(header.len() as u32)?;
    w.write_all(&header)?;
    w.write_u64::<LittleEndian>(params.len() as u64)?;
    for v in &params {
        w.write_f32::<LittleEndian>(*v)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back into a network, returning the stored epoch.
pub fn load(path: &Path) -> Result<(Network, u32)> {
    let file =
        File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        bail!("{} is not a checkpoint file", path.display());
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        bail!("checkpoint version {version} is not supported (expected {VERSION})");
    }
    let header_len = r.read_u32::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header =
        serde_json::from_slice(&header_bytes).context("parsing checkpoint header")?;

    let num_params = r.read_u64::<LittleEndian>()? as usize;
    let mut params = vec![0.0f32; num_params];
    r.read_f32_into::<LittleEndian>(&mut params)?;

    let mut network = Network::new(header.config, 0).context("rebuilding checkpoint network")?;
    network
        .load_flat_params(&params)
        .context("loading checkpoint parameters")?;
    Ok((network, header.epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cytoloc_core::ParamGroup;

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            encoder_channels: [4, 6, 8, 10],
            bottleneck_channels: 12,
            dense_units: [8, 4],
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn save_load_round_trips_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let network = Network::new(small_config(), 99).unwrap();
        save(&path, &network, 37).unwrap();

        let (loaded, epoch) = load(&path).unwrap();
        assert_eq!(epoch, 37);
        assert_eq!(loaded.config(), network.config());
        assert_eq!(loaded.flat_params(), network.flat_params());
        for group in ParamGroup::ALL {
            assert_eq!(loaded.group_checksum(group), network.group_checksum(group));
        }
    }

    #[test]
    fn foreign_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(load(&path).is_err());
    }
}
