use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Kinematic tree of a body: one parent per joint, root marked `-1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub name: String,
    pub parents: Vec<i32>,
    /// Heel/toe joints used by foot-contact labelling.
    pub feet: Vec<usize>,
}

/// SMPL body tree, 22 joints.
const SMPL22_PARENTS: [i32; 22] = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19];

/// SMPL-X joints 1..=54 (body minus pelvis, jaw, eyes, both hands).
fn smplx_parent(joint: usize) -> usize {
    match joint {
        1..=21 => SMPL22_PARENTS[joint] as usize,
        22..=24 => 15,
        25..=39 => finger_parent(joint - 25, 20, 25),
        40..=54 => finger_parent(joint - 40, 21, 40),
        _ => unreachable!("SMPL-X joint {joint}"),
    }
}

fn finger_parent(local: usize, wrist: usize, base: usize) -> usize {
    // five fingers of three segments each
    if local % 3 == 0 {
        wrist
    } else {
        base + local - 1
    }
}

impl SkeletonSpec {
    pub fn new(name: impl Into<String>, parents: Vec<i32>, feet: Vec<usize>) -> Result<Self> {
        let s = Self { name: name.into(), parents, feet };
        s.validate()?;
        Ok(s)
    }

    /// Default desk-scale body: root, spine, head, two two-segment arms and a
    /// single collapsed leg ending at the foot.
    pub fn synthetic8() -> Self {
        Self { name: "synthetic8".into(), parents: vec![-1, 0, 1, 1, 3, 1, 5, 0], feet: vec![7] }
    }

    /// 22-joint SMPL-style body (positions, velocities and 6D rotations).
    pub fn interhuman22() -> Self {
        Self { name: "interhuman22".into(), parents: SMPL22_PARENTS.to_vec(), feet: vec![7, 8, 10, 11] }
    }

    /// 56 rows: root translation, root orientation, then 54 SMPL-X joints.
    pub fn interx56() -> Self {
        let mut parents = vec![-1, 0];
        for joint in 1..=54 {
            parents.push(smplx_parent(joint) as i32 + 1);
        }
        Self { name: "interx56".into(), parents, feet: vec![8, 9, 11, 12] }
    }

    /// Simple chain used when a file carries an unregistered joint count.
    pub fn chain(joints: usize) -> Self {
        let parents = (0..joints as i32).map(|j| j - 1).collect();
        Self { name: format!("chain{joints}"), parents, feet: vec![joints.saturating_sub(1)] }
    }

    /// Registered skeleton for a joint count, falling back to a chain.
    pub fn for_joint_count(joints: usize) -> Self {
        match joints {
            8 => Self::synthetic8(),
            22 => Self::interhuman22(),
            56 => Self::interx56(),
            j => Self::chain(j),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        let p = self.parents[joint];
        (p >= 0).then_some(p as usize)
    }

    pub fn root(&self) -> usize {
        self.parents.iter().position(|&p| p < 0).unwrap_or(0)
    }

    /// Non-root joints paired with their parent, in joint order.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.joint_count()).filter_map(|j| self.parent(j).map(|p| (j, p)))
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joint_count();
        if j < 2 {
            return Err(invalid(format!("skeleton `{}` needs at least 2 joints", self.name)));
        }
        let roots = self.parents.iter().filter(|&&p| p < 0).count();
        if roots != 1 {
            return Err(invalid(format!("skeleton `{}` has {roots} roots", self.name)));
        }
        for (joint, &p) in self.parents.iter().enumerate() {
            if p >= j as i32 || p == joint as i32 || p < -1 {
                return Err(invalid(format!("joint {joint} has invalid parent {p}")));
            }
        }
        for start in 0..j {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = self.parent(cur) {
                cur = p;
                steps += 1;
                if steps > j {
                    return Err(invalid(format!("skeleton `{}` has a cycle through joint {start}", self.name)));
                }
            }
        }
        if let Some(&f) = self.feet.iter().find(|&&f| f >= j) {
            return Err(invalid(format!("foot joint {f} out of range for {j} joints")));
        }
        Ok(())
    }
}
