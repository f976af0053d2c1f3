from pyspil import ExperimentConfig, ModelSpec, evaluate, train
from pyspil.curves import RunDirectory
from dotenv import load_dotenv

load_dotenv()
config = ExperimentConfig.from_file("configs/car_spil.toml")
env = ModelSpec.from_id(config.env, horizon=config.trainer.n, gamma=config.trainer.gamma)
with RunDirectory(config.resolved_output_dir(), config.checkpoint_interval) as run:
    run.write_config(config)
    result = train(env, config.trainer, config.multiplier, config.surrogate, on_iteration=run.on_iteration)
    run.finish(result.actor, result.critic)
summary = evaluate(result.actor, env, config.eval_episodes, seed=1)
print(summary.mean_return, summary.safe_rate)
