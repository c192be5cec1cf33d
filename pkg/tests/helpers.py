from geoext.geometry import ConfigSpace, ScalarField


def reduced_scalar(structure, text):
    """ScalarField on the reduced chart from an expression string."""
    return ScalarField.from_expression(
        text, ConfigSpace(structure.reduced_coords))


def random_reduced_states(structure, rng, count, vel_scale=1.0):
    box = structure.reduced_box()
    for _ in range(count):
        qr = rng.uniform(box.lows, box.highs)
        vr = rng.uniform(-vel_scale, vel_scale, structure.m)
        yield qr, vr
