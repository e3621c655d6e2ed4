from drotree.main import solve
from drotree.main import classify_instance
from drotree.main import assess
from drotree.main import gamma_sweep
from drotree.main import debug
from drotree.main import run
from drotree.tree import load_instance
from drotree.instance_gen import gen_random
from drotree.instance_gen import gen_water_analog
