"""Hand-written synthetic scripts shared by several tests."""
from demoseg.synth import DRAWER_BOX, ObjectSpec, Script, TaskSpec


def drawer_object():
    return ObjectSpec("drawer", "brown", ("cabinet drawer",), (DRAWER_BOX[2] - DRAWER_BOX[0], DRAWER_BOX[3] - DRAWER_BOX[1]),
                      ((DRAWER_BOX[0] + DRAWER_BOX[2]) / 2.0, float(DRAWER_BOX[3])), movable=False,
                      is_container=True, states=("open", "closed"), initial_state="closed")


def drawer_script(episode_id="drawer_demo"):
    """Open the drawer, move the cup beside the bowl, close the drawer."""
    objects = [
        drawer_object(),
        ObjectSpec("cup", "red", ("mug",), (20, 20), (220.0, 150.0)),
        ObjectSpec("bowl", "white", ("dish",), (24, 20), (150.0, 150.0)),
    ]
    tasks = [
        TaskSpec("open", "drawer", 4, 27),
        TaskSpec("pick_place", "cup", 32, 55, ref="bowl", direction="left"),
        TaskSpec("close", "drawer", 60, 83),
    ]
    return Script(7, episode_id, objects, tasks)
