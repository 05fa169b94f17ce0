from pyfedattn.environment import init_env

init_env()
