"""How augmentations move rotation labels.

Run: python demos/02_augmentation_labels.py

The renderer draws a fixed wireframe at a rotation R. An in-plane rotation of
the image by theta is the same picture as rendering M_theta @ R, and a
left-right flip is rendering D R D with D = diag(-1, 1, 1). Those two facts
are what let the student see a rotated view while the teacher's prediction is
aligned by a matrix product. Occlusion changes no labels.
"""

import numpy as np

from rotssl import augment, so3, synth

rng = np.random.default_rng(3)
r = so3.sample_uniform_rotation(rng)
img = synth.render(r)


def ascii(x, width=32):
    ramp = " .:-=+*#%@"
    return "\n".join("".join(ramp[min(9, int(v * 9.99))] for v in row[:width]) for row in x[::2])


print("original view\n" + ascii(img))

for theta in (-30.0, 30.0):
    rot = augment.rotate_image(img, theta)
    ref = synth.render(so3.inplane_rotation(theta) @ r)
    err = np.abs(rot.pixels - ref)[rot.mask].mean()
    print(f"\nrotate {theta:+.0f} deg vs render(M_theta R): mean abs pixel diff {err:.4f}")

flipped = augment.flip_image(img)
err = np.abs(flipped.pixels - synth.render(augment.flip_label(r))).mean()
print(f"flip vs render(D R D): mean abs pixel diff {err:.4f}")

cfg = augment.AugConfig()
donors = [synth.render(q) for q in so3.sample_uniform_rotation(rng, 8)]
w, w_rec, s_img, s_rec = augment.augment_pair(img, donors, cfg, rng)
print(f"\nweak view: flipped={w_rec.flipped} scale={w_rec.scale:.2f}")
print(f"strong view: flipped={s_rec.flipped} scale={s_rec.scale:.2f} theta={s_rec.theta:+.1f} "
      f"holes={len(s_rec.holes)} patches={len(s_rec.patches)}")
print("strong view\n" + ascii(s_img.pixels))
print("\nlabel for the strong view:\n", np.round(augment.transform_label(r, s_rec), 3))
