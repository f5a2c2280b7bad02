//! Garment-invariant body representation: grouped joint heatmaps next to the
//! measurement-garment render, plus the alternative representations used to
//! compare against it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{HeatmapStack, JointId};
use crate::raster::{concat_channels, split_channels, FrameImage};
use crate::semantic::SemanticMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JointGroup {
    /// Right-side limb joints.
    #[serde(rename = "R")]
    Right,
    #[serde(rename = "G")]
    Head,
    /// Left-side limb joints.
    #[serde(rename = "B")]
    Left,
    #[serde(rename = "X")]
    Discard,
}

impl JointGroup {
    /// Output channel of the grouped image, or `None` for discarded joints.
    pub fn channel(self) -> Option<usize> {
        match self {
            JointGroup::Right => Some(0),
            JointGroup::Head => Some(1),
            JointGroup::Left => Some(2),
            JointGroup::Discard => None,
        }
    }
}

/// Assignment of every joint id to one heatmap group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointGroupTable {
    groups: BTreeMap<JointId, JointGroup>,
}

const SYNTHETIC17: &str = include_str!("../data/joint_groups_synthetic17.json");
const WHOLEBODY133: &str = include_str!("../data/joint_groups_wholebody133.json");

impl JointGroupTable {
    pub fn new(groups: BTreeMap<JointId, JointGroup>) -> Self {
        Self { groups }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Table for the 17-joint synthetic skeleton. Hips, knees and the pelvis
    /// are discarded; the chest joins the head group.
    pub fn synthetic17() -> Self {
        Self::from_json(SYNTHETIC17).expect("bundled table parses")
    }

    /// Table for 133-keypoint whole-body detectors (COCO-WholeBody order).
    pub fn wholebody133() -> Self {
        Self::from_json(WHOLEBODY133).expect("bundled table parses")
    }

    /// The 17-joint table with nothing discarded: hips and knees join their
    /// side's limb group and the pelvis joins the head group.
    pub fn synthetic17_all_joints() -> Self {
        use crate::synth::Joint;
        let mut t = Self::synthetic17();
        for (j, g) in [
            (Joint::LeftHip, JointGroup::Left),
            (Joint::LeftKnee, JointGroup::Left),
            (Joint::RightHip, JointGroup::Right),
            (Joint::RightKnee, JointGroup::Right),
            (Joint::Pelvis, JointGroup::Head),
        ] {
            t.groups.insert(j.id(), g);
        }
        t
    }

    pub fn group(&self, id: JointId) -> Option<JointGroup> {
        self.groups.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn discarded(&self) -> impl Iterator<Item = JointId> + '_ {
        self.groups.iter().filter(|(_, g)| **g == JointGroup::Discard).map(|(j, _)| *j)
    }
}

/// Collapses per-joint heatmaps into an RGB image: R right limbs, G head,
/// B left limbs, each the per-pixel maximum over its group.
pub fn group_heatmaps(heatmaps: &HeatmapStack, table: &JointGroupTable) -> Result<FrameImage> {
    let (h, w) = heatmaps.resolution();
    let mut data = vec![0.0f32; 3 * h * w];
    for (id, map) in heatmaps.iter() {
        let group = table
            .group(id)
            .ok_or_else(|| Error::precondition(format!("joint {id} is missing from the group table")))?;
        if let Some(c) = group.channel() {
            for (o, v) in data[c * h * w..(c + 1) * h * w].iter_mut().zip(map) {
                *o = o.max(*v);
            }
        }
    }
    FrameImage::new(3, h, w, data)
}

/// Six-channel garment-invariant representation: measurement-garment render
/// (channels 0..3) then grouped heatmaps (channels 3..6).
#[derive(Clone, Debug, PartialEq)]
pub struct GarmentInvariantRep(FrameImage);

impl GarmentInvariantRep {
    pub fn image(&self) -> &FrameImage {
        &self.0
    }

    pub fn into_image(self) -> FrameImage {
        self.0
    }

    pub fn split(&self) -> (FrameImage, FrameImage) {
        split_channels(&self.0, 3).expect("six channels")
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.0.resolution()
    }
}

pub fn build_gi(vm: &FrameImage, grouped: &FrameImage) -> Result<GarmentInvariantRep> {
    for (name, img) in [("vm render", vm), ("grouped heatmaps", grouped)] {
        if img.channels() != 3 {
            return Err(Error::shape(format!("{name} has {} channels, expected 3", img.channels())));
        }
    }
    Ok(GarmentInvariantRep(concat_channels(vm, grouped)?))
}

/// Body representation fed to the semantic-map network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepresentationKind {
    /// Direct semantic estimate, rendered in palette colors.
    Dp,
    /// Grouped heatmaps of all joints.
    Hm,
    /// Grouped heatmaps without the garment-sensitive joints.
    Shm,
    /// Measurement-garment render alone.
    Vm,
    /// Measurement-garment render plus grouped heatmaps.
    Full,
}

impl RepresentationKind {
    pub const ALL: [RepresentationKind; 5] = [
        RepresentationKind::Dp,
        RepresentationKind::Hm,
        RepresentationKind::Shm,
        RepresentationKind::Vm,
        RepresentationKind::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RepresentationKind::Dp => "DP",
            RepresentationKind::Hm => "HM",
            RepresentationKind::Shm => "SHM",
            RepresentationKind::Vm => "VM",
            RepresentationKind::Full => "GI",
        }
    }

    pub fn channels(self) -> usize {
        if self == RepresentationKind::Full {
            6
        } else {
            3
        }
    }
}

impl std::str::FromStr for RepresentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RepresentationKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s) || (s.eq_ignore_ascii_case("full") && *k == RepresentationKind::Full))
            .ok_or_else(|| Error::Config(format!("unknown representation `{s}`")))
    }
}

/// Whatever a representation may be built from; each kind uses a subset.
#[derive(Clone, Copy, Debug, Default)]
pub struct VariantInputs<'a> {
    pub direct_semantic: Option<&'a SemanticMap>,
    pub heatmaps: Option<&'a HeatmapStack>,
    pub vm: Option<&'a FrameImage>,
    /// Table with garment-sensitive joints discarded (SHM and full).
    pub table: Option<&'a JointGroupTable>,
    /// Table keeping every joint (HM).
    pub all_joints_table: Option<&'a JointGroupTable>,
}

pub fn build_variant(kind: RepresentationKind, inputs: &VariantInputs) -> Result<FrameImage> {
    fn need<'a, T>(v: Option<&'a T>, what: &str, kind: RepresentationKind) -> Result<&'a T> {
        v.ok_or_else(|| Error::precondition(format!("{} representation needs {what}", kind.name())))
    }
    match kind {
        RepresentationKind::Dp => Ok(need(inputs.direct_semantic, "a direct semantic estimate", kind)?.render_colors()),
        RepresentationKind::Hm => group_heatmaps(
            need(inputs.heatmaps, "heatmaps", kind)?,
            need(inputs.all_joints_table, "an all-joints group table", kind)?,
        ),
        RepresentationKind::Shm => {
            group_heatmaps(need(inputs.heatmaps, "heatmaps", kind)?, need(inputs.table, "a group table", kind)?)
        }
        RepresentationKind::Vm => Ok(need(inputs.vm, "a vm render", kind)?.clone()),
        RepresentationKind::Full => {
            let grouped =
                group_heatmaps(need(inputs.heatmaps, "heatmaps", kind)?, need(inputs.table, "a group table", kind)?)?;
            Ok(build_gi(need(inputs.vm, "a vm render", kind)?, &grouped)?.into_image())
        }
    }
}
